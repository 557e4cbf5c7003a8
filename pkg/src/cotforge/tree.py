"""Stage 3: tree search over reasoning steps and preference-pair mining.

The search loops select -> expand(+verify) -> backpropagate. Selection walks
levels from the root; once every node of a level has max_path_num paths
through it, it descends into accepted children whose sampled paths are not
all correct. Expansion samples whole-path completions from the selected
node's serialized prefix, grafts them as step nodes (byte-identical step
prefixes share nodes), executes each path's final code for a verdict, and
classifies. Paths over the token budget are truncated and counted as
incorrect without execution. Preference pairs come from accepted parents:
the two classified children with the greatest score difference, provided
the loser is rejected or the gap reaches the configured threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .backend import Backend, CompletionRequest, Message, system_message, user_message
from .errors import (
    BackendError,
    CotParseError,
    SandboxEnvironmentError,
    SearchInfrastructureError,
    TraceValidationError,
    ValidationError,
)
from .maker import Executor
from .model import (
    CHAIN_CLOSE,
    THINKING,
    THINKING_CLOSE,
    CodeProblem,
    StepUnit,
    TokenBudget,
    count_tokens,
    fence_block,
    parse_cot,
    scan_units_lenient,
    serialize_step_prefix,
    trace_units,
    truncate_to_budget,
)
from .prompts import render_prompt

logger = logging.getLogger(__name__)

OPEN = "open"
ACCEPTED = "accepted"
REJECTED = "rejected"

SELECTION_TIE_BREAK = "lowest-score-first"


@dataclass(frozen=True)
class SearchConfig:
    max_path_num: int = 5
    max_depth_num: int = 64
    token_budget: TokenBudget = field(default_factory=TokenBudget)
    pair_accuracy_gap: float = 0.4
    temperature: float = 0.2
    seed: int | None = None
    max_tokens: int = 8192
    max_infra_retries: int = 3

    def validate(self) -> None:
        if self.max_path_num < 2:
            raise ValidationError("search_max_path_num", "pairs need contrast; must be >= 2")
        if self.max_depth_num < 1:
            raise ValidationError("search_max_depth_num")
        if not (0.0 <= self.pair_accuracy_gap <= 1.0):
            raise ValidationError("search_pair_gap_range")

    def echo(self) -> dict:
        return {
            "max_path_num": self.max_path_num,
            "max_depth_num": self.max_depth_num,
            "token_limit": self.token_budget.limit,
            "token_counter": self.token_budget.counter,
            "pair_accuracy_gap": self.pair_accuracy_gap,
            "temperature": self.temperature,
            "seed": self.seed,
            "selection_tie_break": SELECTION_TIE_BREAK,
        }


@dataclass
class ReasoningNode:
    id: str
    parent_id: str | None
    kind: str  # root | thinking | reflection | answer
    step_text: str
    depth: int
    path_count: int = 0
    correct_count: int = 0
    status: str = OPEN
    is_answer: bool = False

    def score(self) -> Fraction:
        if self.path_count == 0:
            return Fraction(0)
        return Fraction(self.correct_count, self.path_count)


@dataclass
class PathRecord:
    id: str
    origin_id: str
    leaf_id: str
    passed: bool
    truncated: bool
    verdict_status: str
    malformed: bool = False


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    prefix: str
    chosen_step: str
    rejected_step: str
    chosen_score: float
    rejected_score: float
    parent_id: str = ""
    chosen_id: str = ""
    rejected_id: str = ""

    def validate(self) -> None:
        if self.chosen_step == self.rejected_step:
            raise ValidationError("pair_steps_distinct")
        if not self.chosen_score > self.rejected_score:
            raise ValidationError("pair_score_order")


class ReasoningTree:
    """One problem's search tree: id-indexed nodes plus recorded paths."""

    def __init__(self, problem_id: str, statement: str, meta: dict | None = None):
        self.problem_id = problem_id
        self.statement = statement
        self.meta = dict(meta or {})
        self.nodes: dict[str, ReasoningNode] = {}
        self.children: dict[str, list[str]] = {}
        self.paths: list[PathRecord] = []
        self._node_seq = 0
        self._path_seq = 0
        self.root_id = self._add_node(None, "root", statement, 0, is_answer=False).id

    def _add_node(self, parent_id: str | None, kind: str, text: str, depth: int, is_answer: bool) -> ReasoningNode:
        node = ReasoningNode(
            id=f"n{self._node_seq}",
            parent_id=parent_id,
            kind=kind,
            step_text=text,
            depth=depth,
            is_answer=is_answer,
        )
        self._node_seq += 1
        self.nodes[node.id] = node
        self.children[node.id] = []
        if parent_id is not None:
            self.children[parent_id].append(node.id)
        return node

    def add_child(self, parent_id: str, kind: str, text: str, is_answer: bool = False) -> ReasoningNode:
        parent = self.nodes[parent_id]
        if parent.is_answer:
            raise ValidationError("answer_nodes_are_leaves")
        return self._add_node(parent_id, kind, text, parent.depth + 1, is_answer)

    def child_matching(self, parent_id: str, kind: str, text: str, is_answer: bool = False) -> ReasoningNode | None:
        for cid in self.children[parent_id]:
            child = self.nodes[cid]
            if child.is_answer == is_answer and child.kind == kind and child.step_text == text:
                return child
        return None

    def ancestry(self, node_id: str) -> list[str]:
        """Node ids from the root down to node_id inclusive."""
        chain: list[str] = []
        cur: str | None = node_id
        while cur is not None:
            chain.append(cur)
            cur = self.nodes[cur].parent_id
        chain.reverse()
        return chain

    def chain_units(self, node_id: str) -> tuple[StepUnit, ...]:
        """Step units from the root (exclusive) down to node_id."""
        units = []
        for nid in self.ancestry(node_id)[1:]:
            node = self.nodes[nid]
            if node.is_answer:
                raise ValidationError("answer_nodes_are_leaves", "cannot take a prefix through an answer")
            units.append(StepUnit(node.kind, node.step_text))
        return tuple(units)

    def record_path(
        self,
        origin_id: str,
        leaf_id: str,
        passed: bool,
        truncated: bool,
        verdict_status: str,
        malformed: bool = False,
    ) -> PathRecord:
        record = PathRecord(
            id=f"p{self._path_seq}",
            origin_id=origin_id,
            leaf_id=leaf_id,
            passed=passed,
            truncated=truncated,
            verdict_status=verdict_status,
            malformed=malformed,
        )
        self._path_seq += 1
        self.paths.append(record)
        return record


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def classify(node: ReasoningNode, config: SearchConfig) -> str:
    """accepted iff some path through the node passed; rejected iff the path
    budget is exhausted with zero passes; open otherwise."""
    if node.correct_count >= 1:
        return ACCEPTED
    if node.path_count >= config.max_path_num:
        return REJECTED
    return OPEN


def backpropagate(tree: ReasoningTree, path: PathRecord, config: SearchConfig) -> None:
    """Count the recorded path on every node it passes through, root inclusive."""
    for nid in tree.ancestry(path.leaf_id):
        node = tree.nodes[nid]
        node.path_count += 1
        if path.passed:
            node.correct_count += 1
        node.status = classify(node, config)


def select(tree: ReasoningTree, config: SearchConfig) -> str | None:
    """Next node to expand, or None when no expandable node remains.

    Walks levels from the root. Within a level, nodes still short of
    max_path_num paths are expanded first, lowest score first (creation
    order breaks ties). Once a level is fully explored the walk descends
    into accepted children whose paths are not all correct, skipping answer
    nodes and the depth cap.
    """
    level = [tree.nodes[tree.root_id]]
    order = {nid: i for i, nid in enumerate(tree.nodes)}
    while level:
        expandable = [n for n in level if n.path_count < config.max_path_num]
        if expandable:
            chosen = min(expandable, key=lambda n: (n.score(), order[n.id]))
            return chosen.id
        nxt: dict[str, ReasoningNode] = {}
        for node in level:
            for cid in tree.children[node.id]:
                child = tree.nodes[cid]
                if child.is_answer or child.depth >= config.max_depth_num:
                    continue
                if child.status == ACCEPTED and child.correct_count < child.path_count:
                    nxt.setdefault(cid, child)
        level = list(nxt.values())
    return None


def build_policy_messages(statement: str, prefix_text: str, prompt_dir=None) -> tuple[Message, ...]:
    body = statement + "\n\nPartial chain-of-thought to continue:\n" + prefix_text
    return (system_message(render_prompt("policy_continuation", prompt_dir)), user_message(body))


def _graft(
    tree: ReasoningTree,
    origin_id: str,
    new_units: Iterable[StepUnit],
    answer_code: str | None,
    config: SearchConfig,
) -> str:
    """Attach new units (and optionally the answer) below origin, merging
    byte-identical prefixes and clamping at the depth cap. Returns leaf id."""
    cur = tree.nodes[origin_id]
    for unit in new_units:
        if cur.depth + 1 > config.max_depth_num:
            return cur.id
        child = tree.child_matching(cur.id, unit.kind, unit.text)
        if child is None:
            child = tree.add_child(cur.id, unit.kind, unit.text)
        cur = child
    if answer_code is not None:
        if cur.depth + 1 > config.max_depth_num:
            return cur.id
        answer = tree.child_matching(cur.id, "answer", answer_code, is_answer=True)
        if answer is None:
            answer = tree.add_child(cur.id, "answer", answer_code, is_answer=True)
        cur = answer
    return cur.id


def expand(
    tree: ReasoningTree,
    node_id: str,
    problem: CodeProblem,
    backend: Backend,
    executor: Executor,
    config: SearchConfig,
    prompt_dir=None,
) -> list[PathRecord]:
    """Sample completions from the node's prefix until max_path_num paths
    pass through it; graft, verify, backpropagate, classify.

    Over-budget completions are truncated, marked incorrect, and counted
    without execution. Completions that fail to parse or do not extend the
    prefix at a unit boundary are recorded as malformed failed paths ending
    at the origin (they consume path budget; the model produced them).
    Infrastructure failures are retried and never consume path budget.
    """
    origin = tree.nodes[node_id]
    if origin.is_answer:
        raise ValidationError("expand_answer_node")
    prefix_units = tree.chain_units(node_id)
    prefix_text = serialize_step_prefix(prefix_units)
    messages = build_policy_messages(tree.statement, prefix_text, prompt_dir)
    completed: list[PathRecord] = []
    infra_failures = 0

    def infra(reason: str) -> None:
        nonlocal infra_failures
        infra_failures += 1
        logger.warning("infrastructure failure during expansion of %s: %s", node_id, reason)
        if infra_failures > config.max_infra_retries:
            raise SearchInfrastructureError(
                f"expansion of {node_id} failed {infra_failures} times: {reason}", tree=tree
            )

    while origin.path_count < config.max_path_num:
        try:
            completion = backend.complete(
                CompletionRequest(
                    messages=messages,
                    temperature=config.temperature,
                    max_tokens=config.max_tokens,
                    n_samples=1,
                    seed=config.seed,
                )
            ).samples[0]
        except BackendError as exc:
            infra(f"backend: {exc}")
            continue
        full_text = prefix_text + completion

        if count_tokens(full_text, config.token_budget) > config.token_budget.limit:
            cut, _ = truncate_to_budget(full_text, config.token_budget)
            try:
                units, _ = scan_units_lenient(cut)
            except CotParseError:
                units = ()
            new_units = units[len(prefix_units) :] if units[: len(prefix_units)] == prefix_units else ()
            leaf_id = _graft(tree, node_id, new_units, None, config)
            record = tree.record_path(
                node_id, leaf_id, passed=False, truncated=True, verdict_status="truncated_generation"
            )
        else:
            try:
                trace = parse_cot(full_text, problem_id=tree.problem_id)
                units = trace_units(trace)
                if units[: len(prefix_units)] != prefix_units:
                    raise CotParseError("prefix_diverged", len(prefix_text))
            except (CotParseError, TraceValidationError) as exc:
                logger.info("malformed completion from %s: %s", node_id, exc)
                record = tree.record_path(
                    node_id, node_id, passed=False, truncated=False,
                    verdict_status="failed", malformed=True,
                )
            else:
                try:
                    verdict = executor.verify(problem, trace.final_code)
                except (SandboxEnvironmentError, BackendError) as exc:
                    infra(f"executor: {exc}")
                    continue
                leaf_id = _graft(tree, node_id, units[len(prefix_units) :], trace.final_code, config)
                record = tree.record_path(
                    node_id, leaf_id, passed=verdict.passed, truncated=False,
                    verdict_status=verdict.status,
                )
        backpropagate(tree, record, config)
        completed.append(record)
    return completed


def search(
    problem: CodeProblem,
    backend: Backend,
    executor: Executor,
    config: SearchConfig | None = None,
    prompt_dir=None,
    persist_on_abort=None,
) -> ReasoningTree:
    """Run the full search for one problem.

    Deterministic given a scripted backend and fixed seed. On repeated
    infrastructure failure the partial tree is persisted (when a path is
    given) and the error re-raised.
    """
    config = config or SearchConfig()
    config.validate()
    tree = ReasoningTree(
        problem.id,
        problem.statement,
        meta={"backend_id": backend.backend_id, "config": config.echo()},
    )
    try:
        while (node_id := select(tree, config)) is not None:
            expand(tree, node_id, problem, backend, executor, config, prompt_dir)
    except SearchInfrastructureError:
        if persist_on_abort is not None:
            from pathlib import Path

            Path(persist_on_abort).write_text(tree_to_jsonl(tree), encoding="utf-8")
            logger.error("search aborted; partial tree persisted to %s", persist_on_abort)
        raise
    return tree


# ---------------------------------------------------------------------------
# Preference pairs
# ---------------------------------------------------------------------------


def _unit_delta(prefix_units: tuple[StepUnit, ...], unit: StepUnit) -> str:
    base = serialize_step_prefix(prefix_units)
    return serialize_step_prefix(prefix_units + (unit,))[len(base):]


def _answer_delta(prefix_units: tuple[StepUnit, ...], code: str) -> str:
    closing = THINKING_CLOSE if prefix_units and prefix_units[-1].kind == THINKING else ""
    return closing + CHAIN_CLOSE + "\n" + fence_block(code)


def _child_step_text(tree: ReasoningTree, parent_units: tuple[StepUnit, ...], child: ReasoningNode) -> str:
    if child.is_answer:
        return _answer_delta(parent_units, child.step_text)
    return _unit_delta(parent_units, StepUnit(child.kind, child.step_text))


def pair_prefix(tree: ReasoningTree, parent_id: str) -> str:
    """Problem statement plus the serialized root-to-parent step prefix."""
    return tree.statement + "\n" + serialize_step_prefix(tree.chain_units(parent_id))


def extract_pairs(tree: ReasoningTree, config: SearchConfig | None = None) -> list[PreferencePair]:
    """At most one pair per accepted parent with >= 2 classified children.

    The pair maximizes the child score difference subject to: chosen is
    accepted, and rejected is rejected or the gap reaches
    pair_accuracy_gap. Scores are exact correct/path ratios.
    """
    config = config or SearchConfig()
    gap_threshold = Fraction(str(config.pair_accuracy_gap))
    order = {nid: i for i, nid in enumerate(tree.nodes)}
    pairs: list[PreferencePair] = []
    for node in tree.nodes.values():
        if node.status != ACCEPTED or node.is_answer:
            continue
        classified = [
            tree.nodes[cid]
            for cid in tree.children[node.id]
            if tree.nodes[cid].status in (ACCEPTED, REJECTED)
        ]
        if len(classified) < 2:
            continue
        best: tuple | None = None
        for a in classified:
            if a.status != ACCEPTED:
                continue
            for b in classified:
                if a.id == b.id:
                    continue
                sa, sb = a.score(), b.score()
                if sa <= sb:
                    continue
                if not (b.status == REJECTED or (sa - sb) >= gap_threshold):
                    continue
                key = (-(sa - sb), order[a.id], order[b.id])
                if best is None or key < best[0]:
                    best = (key, a, b)
        if best is None:
            continue
        _, chosen, rejected = best
        parent_units = tree.chain_units(node.id)
        pair = PreferencePair(
            problem_id=tree.problem_id,
            prefix=pair_prefix(tree, node.id),
            chosen_step=_child_step_text(tree, parent_units, chosen),
            rejected_step=_child_step_text(tree, parent_units, rejected),
            chosen_score=float(chosen.score()),
            rejected_score=float(rejected.score()),
            parent_id=node.id,
            chosen_id=chosen.id,
            rejected_id=rejected.id,
        )
        pair.validate()
        pairs.append(pair)
    return pairs


def pair_to_dict(pair: PreferencePair) -> dict:
    return {
        "problem_id": pair.problem_id,
        "prefix": pair.prefix,
        "chosen_step": pair.chosen_step,
        "rejected_step": pair.rejected_step,
        "chosen_score": pair.chosen_score,
        "rejected_score": pair.rejected_score,
        "parent_id": pair.parent_id,
        "chosen_id": pair.chosen_id,
        "rejected_id": pair.rejected_id,
    }


def pair_from_dict(d: dict) -> PreferencePair:
    pair = PreferencePair(
        problem_id=d["problem_id"],
        prefix=d["prefix"],
        chosen_step=d["chosen_step"],
        rejected_step=d["rejected_step"],
        chosen_score=d["chosen_score"],
        rejected_score=d["rejected_score"],
        parent_id=d.get("parent_id", ""),
        chosen_id=d.get("chosen_id", ""),
        rejected_id=d.get("rejected_id", ""),
    )
    pair.validate()
    return pair


# ---------------------------------------------------------------------------
# Persistence (JSONL: manifest header, then nodes, then paths)
# ---------------------------------------------------------------------------


def tree_to_jsonl(tree: ReasoningTree) -> str:
    lines = [
        json.dumps(
            {
                "record": "manifest",
                "problem_id": tree.problem_id,
                "statement": tree.statement,
                **tree.meta,
            },
            ensure_ascii=False,
        )
    ]
    for node in tree.nodes.values():
        lines.append(
            json.dumps(
                {
                    "record": "node",
                    "id": node.id,
                    "parent_id": node.parent_id,
                    "kind": node.kind,
                    "step_text": node.step_text,
                    "depth": node.depth,
                    "path_count": node.path_count,
                    "correct_count": node.correct_count,
                    "status": node.status,
                    "is_answer": node.is_answer,
                },
                ensure_ascii=False,
            )
        )
    for path in tree.paths:
        lines.append(
            json.dumps(
                {
                    "record": "path",
                    "id": path.id,
                    "origin_id": path.origin_id,
                    "leaf_id": path.leaf_id,
                    "passed": path.passed,
                    "truncated": path.truncated,
                    "malformed": path.malformed,
                    "verdict_status": path.verdict_status,
                },
                ensure_ascii=False,
            )
        )
    return "\n".join(lines) + "\n"


def tree_from_jsonl(text: str) -> ReasoningTree:
    lines = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not lines or lines[0].get("record") != "manifest":
        raise ValidationError("tree_manifest_missing")
    manifest = lines[0]
    meta = {k: v for k, v in manifest.items() if k not in ("record", "problem_id", "statement")}
    tree = ReasoningTree.__new__(ReasoningTree)
    tree.problem_id = manifest["problem_id"]
    tree.statement = manifest["statement"]
    tree.meta = meta
    tree.nodes = {}
    tree.children = {}
    tree.paths = []
    node_count = 0
    path_count = 0
    root_id = None
    for record in lines[1:]:
        if record["record"] == "node":
            node = ReasoningNode(
                id=record["id"],
                parent_id=record["parent_id"],
                kind=record["kind"],
                step_text=record["step_text"],
                depth=record["depth"],
                path_count=record["path_count"],
                correct_count=record["correct_count"],
                status=record["status"],
                is_answer=record["is_answer"],
            )
            tree.nodes[node.id] = node
            tree.children[node.id] = []
            if node.parent_id is not None:
                tree.children[node.parent_id].append(node.id)
            else:
                root_id = node.id
            node_count += 1
        elif record["record"] == "path":
            tree.paths.append(
                PathRecord(
                    id=record["id"],
                    origin_id=record["origin_id"],
                    leaf_id=record["leaf_id"],
                    passed=record["passed"],
                    truncated=record["truncated"],
                    verdict_status=record["verdict_status"],
                    malformed=record.get("malformed", False),
                )
            )
            path_count += 1
    if root_id is None:
        raise ValidationError("tree_root_missing")
    tree.root_id = root_id
    tree._node_seq = node_count
    tree._path_seq = path_count
    return tree
