from __future__ import annotations

from collections import Counter

import pytest

from cotforge.backend import CompletionRequest, MockBackend
from cotforge.errors import SearchInfrastructureError, ValidationError
from cotforge.model import (
    CotTrace,
    StepUnit,
    TokenBudget,
    parse_step_prefix,
    serialize_cot,
    serialize_step_prefix,
    units_to_segments,
)
from cotforge.tree import (
    ACCEPTED,
    OPEN,
    REJECTED,
    PreferencePair,
    ReasoningTree,
    SearchConfig,
    backpropagate,
    build_policy_messages,
    classify,
    expand,
    extract_pairs,
    pair_from_dict,
    pair_to_dict,
    search,
    select,
    tree_from_jsonl,
    tree_to_jsonl,
)

from conftest import ScriptedExecutor, make_problem

CFG = SearchConfig(max_path_num=5, max_depth_num=8, token_budget=TokenBudget(limit=2000))


def thinking_units(*steps: str) -> tuple[StepUnit, ...]:
    return tuple(StepUnit("thinking", s) for s in steps)


def completion_from(prefix_units: tuple[StepUnit, ...], new_steps: list[str], code: str) -> str:
    """The continuation text a policy model would emit from a node's prefix."""
    units = tuple(prefix_units) + thinking_units(*new_steps)
    full = serialize_cot(CotTrace("t", units_to_segments(units), code))
    return full[len(serialize_step_prefix(prefix_units)):]


def script_node(
    mock: MockBackend,
    problem,
    prefix_units: tuple[StepUnit, ...],
    replies: list[str],
    cfg: SearchConfig = CFG,
) -> None:
    messages = build_policy_messages(problem.statement, serialize_step_prefix(prefix_units))
    request = CompletionRequest(
        messages=messages, temperature=cfg.temperature, max_tokens=cfg.max_tokens, n_samples=1, seed=cfg.seed
    )
    mock.script(request, replies)


def recount(tree: ReasoningTree) -> dict[str, tuple[int, int]]:
    """Brute-force recount of (path_count, correct_count) from recorded paths."""
    counts = {nid: [0, 0] for nid in tree.nodes}
    for path in tree.paths:
        for nid in tree.ancestry(path.leaf_id):
            counts[nid][0] += 1
            counts[nid][1] += int(path.passed)
    return {nid: (c[0], c[1]) for nid, c in counts.items()}


def assert_tree_invariants(tree: ReasoningTree, cfg: SearchConfig) -> None:
    counted = recount(tree)
    for nid, node in tree.nodes.items():
        assert (node.path_count, node.correct_count) == counted[nid], nid
        assert node.correct_count <= node.path_count
        assert node.status == classify(node, cfg)
        if node.status == REJECTED:
            assert node.correct_count == 0 and node.path_count >= cfg.max_path_num
        if node.status == ACCEPTED:
            assert node.correct_count >= 1
        assert node.depth <= cfg.max_depth_num
        if node.is_answer:
            assert tree.children[nid] == []
        assert (node.parent_id is None) == (nid == tree.root_id)
    origins = Counter(p.origin_id for p in tree.paths)
    for nid, originated in origins.items():
        assert originated <= cfg.max_path_num, f"{nid} originated {originated}"
    assert tree.nodes[tree.root_id].path_count == len(tree.paths)
    for nid, node in tree.nodes.items():
        child_paths = sum(tree.nodes[c].path_count for c in tree.children[nid])
        child_correct = sum(tree.nodes[c].correct_count for c in tree.children[nid])
        assert node.path_count >= child_paths, f"{nid}: parent dominance violated"
        assert node.correct_count >= child_correct


class TestClassify:
    def test_exhausted_without_success_rejected(self):
        node = ReasoningTree("p", "s").nodes["n0"]
        node.path_count, node.correct_count = 5, 0
        assert classify(node, CFG) == REJECTED

    def test_one_correct_accepted(self):
        node = ReasoningTree("p", "s").nodes["n0"]
        node.path_count, node.correct_count = 1, 1
        assert classify(node, CFG) == ACCEPTED

    def test_undecided_open(self):
        node = ReasoningTree("p", "s").nodes["n0"]
        node.path_count, node.correct_count = 3, 0
        assert classify(node, CFG) == OPEN


class TestBackpropagate:
    def build_chain(self) -> tuple[ReasoningTree, str]:
        tree = ReasoningTree("p", "statement")
        a = tree.add_child(tree.root_id, "thinking", "a")
        b = tree.add_child(a.id, "thinking", "b")
        answer = tree.add_child(b.id, "answer", "code", is_answer=True)
        return tree, answer.id

    def test_passing_path_of_depth_three_updates_four_nodes(self):
        tree, leaf = self.build_chain()
        path = tree.record_path(tree.root_id, leaf, passed=True, truncated=False, verdict_status="passed")
        backpropagate(tree, path, CFG)
        for node in tree.nodes.values():
            assert (node.path_count, node.correct_count) == (1, 1)
            assert node.status == ACCEPTED

    def test_failing_path_counts_only_paths(self):
        tree, leaf = self.build_chain()
        path = tree.record_path(tree.root_id, leaf, passed=False, truncated=False, verdict_status="failed")
        backpropagate(tree, path, CFG)
        for node in tree.nodes.values():
            assert (node.path_count, node.correct_count) == (1, 0)

    def test_root_path_count_equals_total_paths(self):
        tree, leaf = self.build_chain()
        for passed in (True, False, False, True):
            path = tree.record_path(
                tree.root_id, leaf, passed=passed, truncated=False, verdict_status="passed" if passed else "failed"
            )
            backpropagate(tree, path, CFG)
        assert tree.nodes[tree.root_id].path_count == len(tree.paths) == 4
        assert_tree_invariants(tree, CFG)


class TestSelect:
    def test_fresh_tree_selects_root(self):
        tree = ReasoningTree("p", "statement")
        assert select(tree, CFG) == tree.root_id

    def test_descends_into_accepted_not_all_correct_child(self):
        tree = ReasoningTree("p", "statement")
        root = tree.nodes[tree.root_id]
        child = tree.add_child(tree.root_id, "thinking", "good start")
        perfect = tree.add_child(tree.root_id, "thinking", "perfect start")
        root.path_count, root.correct_count, root.status = 5, 3, ACCEPTED
        child.path_count, child.correct_count, child.status = 3, 1, ACCEPTED
        perfect.path_count, perfect.correct_count, perfect.status = 2, 2, ACCEPTED
        assert select(tree, CFG) == child.id

    def test_lowest_score_expanded_first(self):
        tree = ReasoningTree("p", "statement")
        root = tree.nodes[tree.root_id]
        root.path_count, root.correct_count, root.status = 5, 3, ACCEPTED
        high = tree.add_child(tree.root_id, "thinking", "high")
        low = tree.add_child(tree.root_id, "thinking", "low")
        high.path_count, high.correct_count, high.status = 4, 3, ACCEPTED
        low.path_count, low.correct_count, low.status = 4, 1, ACCEPTED
        assert select(tree, CFG) == low.id

    def test_depth_cap_returns_none(self):
        cfg = SearchConfig(max_path_num=2, max_depth_num=1)
        tree = ReasoningTree("p", "statement")
        root = tree.nodes[tree.root_id]
        root.path_count, root.correct_count, root.status = 2, 1, ACCEPTED
        child = tree.add_child(tree.root_id, "thinking", "at cap")
        child.path_count, child.correct_count, child.status = 1, 0, OPEN
        # depth-1 children can never be selected under max_depth_num=1
        assert select(tree, cfg) is None

    def test_answer_nodes_never_selected(self):
        tree = ReasoningTree("p", "statement")
        root = tree.nodes[tree.root_id]
        root.path_count, root.correct_count, root.status = 5, 1, ACCEPTED
        answer = tree.add_child(tree.root_id, "answer", "code", is_answer=True)
        answer.path_count, answer.correct_count, answer.status = 1, 1, ACCEPTED
        assert select(tree, CFG) is None


class TestExpand:
    def test_tops_up_to_max_path_num(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        # pre-record two paths straight to the root so only 3 remain
        for _ in range(2):
            path = tree.record_path(tree.root_id, tree.root_id, passed=False, truncated=False, verdict_status="failed")
            backpropagate(tree, path, CFG)
        mock = MockBackend()
        script_node(mock, problem, (), [completion_from((), [f"s{i}"], f"c{i}") for i in range(3)])
        new_paths = expand(tree, tree.root_id, problem, mock, ScriptedExecutor(), CFG)
        assert len(new_paths) == 3
        assert tree.nodes[tree.root_id].path_count == 5

    def test_truncated_completion_counts_without_execution(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        cfg = SearchConfig(max_path_num=2, max_depth_num=8, token_budget=TokenBudget(limit=40))
        long_step = " ".join(f"w{i}" for i in range(100))  # far over the 40-token budget
        mock = MockBackend()
        script_node(
            mock,
            problem,
            (),
            [
                completion_from((), [long_step], "never run"),
                completion_from((), ["short"], "print('OK')"),
            ],
            cfg,
        )
        executor = ScriptedExecutor()
        expand(tree, tree.root_id, problem, mock, executor, cfg)
        truncated = [p for p in tree.paths if p.truncated]
        assert len(truncated) == 1
        assert truncated[0].verdict_status == "truncated_generation"
        assert not truncated[0].passed
        # the truncated sample consumed path budget but never reached the executor
        assert tree.nodes[tree.root_id].path_count == 2
        assert len(executor.calls) == 1
        assert_tree_invariants(tree, cfg)

    def test_malformed_completion_consumes_budget_without_grafting(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        cfg = SearchConfig(max_path_num=2, max_depth_num=8)
        mock = MockBackend()
        script_node(
            mock, problem, (),
            ["<thinking>never closed properly", completion_from((), ["fine"], "print('OK')")],
            cfg,
        )
        expand(tree, tree.root_id, problem, mock, ScriptedExecutor(), cfg)
        malformed = [p for p in tree.paths if p.malformed]
        assert len(malformed) == 1
        assert malformed[0].leaf_id == tree.root_id
        assert tree.nodes[tree.root_id].path_count == 2
        assert_tree_invariants(tree, cfg)

    def test_identical_failing_completions_reject_the_chain(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        mock = MockBackend()
        same = completion_from((), ["only idea"], "broken")
        script_node(mock, problem, (), [same] * 5)
        expand(tree, tree.root_id, problem, mock, ScriptedExecutor(), CFG)
        statuses = {n.status for n in tree.nodes.values()}
        assert statuses == {REJECTED}
        assert len(tree.nodes) == 3  # root, step, answer
        assert_tree_invariants(tree, CFG)

    def test_infrastructure_failures_do_not_consume_budget(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        cfg = SearchConfig(max_path_num=2, max_depth_num=8, max_infra_retries=10)
        good = completion_from((), ["fine"], "print('OK')")

        class FlakyBackend:
            backend_id = "flaky"

            def __init__(self):
                self.calls = 0

            def complete(self, request):
                self.calls += 1
                if self.calls <= 2:
                    from cotforge.errors import TransportFailure

                    raise TransportFailure("blip")
                return type("Reply", (), {"samples": (good,)})()

        expand(tree, tree.root_id, problem, FlakyBackend(), ScriptedExecutor(), cfg)
        assert tree.nodes[tree.root_id].path_count == 2
        assert len(tree.paths) == 2
        assert not any(p.malformed for p in tree.paths)

    def test_repeated_infrastructure_failure_aborts_with_partial_tree(self):
        problem = make_problem()
        tree = ReasoningTree(problem.id, problem.statement)
        cfg = SearchConfig(max_path_num=2, max_infra_retries=1)

        class DeadBackend:
            backend_id = "dead"

            def complete(self, request):
                from cotforge.errors import TransportFailure

                raise TransportFailure("down")

        with pytest.raises(SearchInfrastructureError) as err:
            expand(tree, tree.root_id, problem, DeadBackend(), ScriptedExecutor(), cfg)
        assert err.value.tree is tree


class TestSearchScenarios:
    def run_all_pass(self, cfg=CFG):
        problem = make_problem()
        mock = MockBackend()
        script_node(
            mock, problem, (),
            [completion_from((), [f"idea {i}"], f"print('OK {i}')") for i in range(cfg.max_path_num)],
            cfg,
        )
        return search(problem, mock, ScriptedExecutor(), cfg)

    def test_all_paths_correct_stops_after_one_level(self):
        tree = self.run_all_pass()
        assert len(tree.paths) == CFG.max_path_num
        assert all(n.status == ACCEPTED for n in tree.nodes.values())
        # five distinct children, each fully correct, so no descent happened
        assert len(tree.children[tree.root_id]) == 5
        assert_tree_invariants(tree, CFG)

    def test_all_paths_fail_no_descent(self):
        problem = make_problem()
        mock = MockBackend()
        same = completion_from((), ["dead end"], "nope")
        script_node(mock, problem, (), [same] * 5)
        tree = search(problem, mock, ScriptedExecutor(), CFG)
        assert len(tree.paths) == 5
        assert tree.nodes[tree.root_id].status == REJECTED
        assert all(n.status == REJECTED for n in tree.nodes.values())
        assert_tree_invariants(tree, CFG)

    def test_mixed_outcomes_descend_and_top_up(self):
        problem = make_problem()
        cfg = CFG
        mock = MockBackend()
        step_a = thinking_units("approach a")
        step_b = thinking_units("approach b")
        script_node(
            mock, problem, (),
            [
                completion_from((), ["approach a"], "print('OK a')"),
                completion_from((), ["approach a"], "print('OK a')"),
                completion_from((), ["approach b"], "print('OK b')"),
                completion_from((), ["approach b"], "broken b1"),
                completion_from((), ["approach b"], "broken b2"),
            ],
            cfg,
        )
        # approach b is accepted (1/3) but not all correct: it gets topped up to 5
        script_node(
            mock, problem, step_b,
            [
                completion_from(step_b, ["patch"], "broken b3"),
                completion_from(step_b, [], "broken b4"),
            ],
            cfg,
        )
        tree = search(problem, mock, ScriptedExecutor(), cfg)
        assert len(tree.paths) == 7
        node_b = tree.child_matching(tree.root_id, "thinking", "approach b")
        assert node_b is not None
        assert (node_b.path_count, node_b.correct_count) == (5, 1)
        assert node_b.status == ACCEPTED
        node_a = tree.child_matching(tree.root_id, "thinking", "approach a")
        assert (node_a.path_count, node_a.correct_count) == (2, 2)
        assert_tree_invariants(tree, cfg)
        # root's children now show a large accuracy gap -> one pair
        pairs = extract_pairs(tree, cfg)
        assert len(pairs) == 1
        pair = pairs[0]
        assert pair.chosen_id == node_a.id and pair.rejected_id == node_b.id
        assert pair.chosen_score == 1.0 and pair.rejected_score == 0.2

    def test_depth_cap_one_clamps_grafting(self):
        cfg = SearchConfig(max_path_num=2, max_depth_num=1)
        problem = make_problem()
        mock = MockBackend()
        script_node(
            mock, problem, (),
            [
                completion_from((), ["s1", "s2", "s3"], "print('OK')"),
                completion_from((), ["t1", "t2"], "zzz"),
            ],
            cfg,
        )
        tree = search(problem, mock, ScriptedExecutor(), cfg)
        assert max(n.depth for n in tree.nodes.values()) <= 1
        assert_tree_invariants(tree, cfg)

    def test_determinism_byte_identical_output(self):
        a = tree_to_jsonl(self.run_all_pass())
        b = tree_to_jsonl(self.run_all_pass())
        assert a == b

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SearchConfig(max_path_num=1).validate()
        with pytest.raises(ValidationError):
            SearchConfig(max_depth_num=0).validate()
        with pytest.raises(ValidationError):
            SearchConfig(pair_accuracy_gap=1.5).validate()


def hand_tree(children: list[tuple[int, int]], parent_counts=(10, 4)) -> ReasoningTree:
    """Accepted parent under the root with the given (path, correct) children."""
    tree = ReasoningTree("p", "A tricky problem statement.")
    root = tree.nodes[tree.root_id]
    parent = tree.add_child(tree.root_id, "thinking", "shared reasoning step")
    parent.path_count, parent.correct_count = parent_counts
    parent.status = classify(parent, CFG)
    root.path_count, root.correct_count = parent_counts
    root.status = classify(root, CFG)
    for i, (paths, correct) in enumerate(children):
        child = tree.add_child(parent.id, "thinking", f"candidate step {i}")
        child.path_count, child.correct_count = paths, correct
        child.status = classify(child, CFG)
    return tree


class TestExtractPairs:
    def test_accepted_vs_rejected_child(self):
        tree = hand_tree([(5, 5), (5, 0)])
        pairs = extract_pairs(tree, CFG)
        assert len(pairs) == 1
        assert pairs[0].chosen_score == 1.0 and pairs[0].rejected_score == 0.0

    def test_gap_below_threshold_no_pair(self):
        tree = hand_tree([(5, 4), (5, 3)])  # 0.8 vs 0.6, both accepted
        assert extract_pairs(tree, CFG) == []

    def test_gap_exactly_at_threshold_pairs(self):
        tree = hand_tree([(5, 4), (5, 2)])  # 0.8 vs 0.4: exact 0.4 gap
        pairs = extract_pairs(tree, CFG)
        assert len(pairs) == 1
        assert pairs[0].chosen_score == 0.8 and pairs[0].rejected_score == 0.4

    def test_single_child_no_pair(self):
        tree = hand_tree([(5, 5)])
        assert extract_pairs(tree, CFG) == []

    def test_open_children_not_classified(self):
        tree = hand_tree([(5, 5), (3, 0)])  # second child is open, not rejected
        assert extract_pairs(tree, CFG) == []

    def test_greatest_difference_wins(self):
        tree = hand_tree([(5, 5), (5, 3), (5, 0)])
        pairs = extract_pairs(tree, CFG)
        assert len(pairs) == 1
        assert pairs[0].chosen_score == 1.0 and pairs[0].rejected_score == 0.0

    def test_at_most_one_pair_per_parent(self):
        tree = hand_tree([(5, 5), (5, 0), (5, 1), (5, 4)])
        assert len(extract_pairs(tree, CFG)) == 1

    def test_rejected_parent_yields_nothing(self):
        tree = hand_tree([(5, 5), (5, 0)], parent_counts=(5, 0))
        # parent rejected: no pairs extracted from it
        assert extract_pairs(tree, CFG) == []

    def test_prefix_reparses_to_node_path(self):
        tree = hand_tree([(5, 5), (5, 0)])
        pair = extract_pairs(tree, CFG)[0]
        assert pair.prefix.startswith("A tricky problem statement.\n<ChainOfThought>")
        cot_part = pair.prefix[pair.prefix.index("<ChainOfThought>"):]
        assert parse_step_prefix(cot_part) == (StepUnit("thinking", "shared reasoning step"),)

    def test_step_deltas_concatenate_into_valid_prefixes(self):
        tree = hand_tree([(5, 5), (5, 0)])
        pair = extract_pairs(tree, CFG)[0]
        cot_part = pair.prefix[pair.prefix.index("<ChainOfThought>"):]
        for delta, text in ((pair.chosen_step, "candidate step 0"), (pair.rejected_step, "candidate step 1")):
            units = parse_step_prefix(cot_part + delta)
            assert units == (StepUnit("thinking", "shared reasoning step"), StepUnit("thinking", text))

    def test_answer_children_pair_with_full_tail(self):
        tree = ReasoningTree("p", "stmt")
        root = tree.nodes[tree.root_id]
        parent = tree.add_child(tree.root_id, "thinking", "final step")
        good = tree.add_child(parent.id, "answer", "print('yes')", is_answer=True)
        bad = tree.add_child(parent.id, "answer", "print('no')", is_answer=True)
        for node, (paths, correct) in ((root, (10, 5)), (parent, (10, 5)), (good, (5, 5)), (bad, (5, 0))):
            node.path_count, node.correct_count = paths, correct
            node.status = classify(node, CFG)
        pair = extract_pairs(tree, CFG)[0]
        assert pair.chosen_step == "</thinking></ChainOfThought>\n```python\nprint('yes')\n```"
        assert pair.rejected_step == "</thinking></ChainOfThought>\n```python\nprint('no')\n```"

    def test_pair_serialization_round_trip(self):
        tree = hand_tree([(5, 5), (5, 0)])
        pair = extract_pairs(tree, CFG)[0]
        assert pair_from_dict(pair_to_dict(pair)) == pair

    def test_pair_validation(self):
        with pytest.raises(ValidationError):
            PreferencePair("p", "prefix", "same", "same", 1.0, 0.0).validate()
        with pytest.raises(ValidationError):
            PreferencePair("p", "prefix", "a", "b", 0.2, 0.8).validate()


class TestTreePersistence:
    def test_round_trip_preserves_bytes(self):
        problem = make_problem()
        mock = MockBackend()
        script_node(mock, problem, (), [completion_from((), [f"i{k}"], f"print('OK {k}')") for k in range(5)])
        tree = search(problem, mock, ScriptedExecutor(), CFG)
        text = tree_to_jsonl(tree)
        loaded = tree_from_jsonl(text)
        assert tree_to_jsonl(loaded) == text
        assert loaded.meta["config"]["max_path_num"] == 5
        assert_tree_invariants(loaded, CFG)

    def test_manifest_is_first_line(self):
        tree = ReasoningTree("p", "s", meta={"backend_id": "mock", "config": CFG.echo()})
        first = tree_to_jsonl(tree).splitlines()[0]
        assert '"record": "manifest"' in first
        assert '"problem_id": "p"' in first
