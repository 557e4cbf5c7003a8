from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotforge.backend import MockBackend
from cotforge.errors import ValidationError
from cotforge.model import CodeProblem
from cotforge.problems import (
    FilterDecision,
    HoldoutDoc,
    NGramIndex,
    SeedSnippet,
    SynthesisFailure,
    decontaminate,
    dedup_snippets,
    evolve_instruction,
    filter_problem,
    ingest_problems,
    ngram_overlap,
    parse_filter_reply,
    synthesize_problem,
)
from cotforge.textnorm import normalize_tokens

from conftest import make_problem


def naive_overlap(a: str, b: str, n: int) -> bool:
    """Independent O(|a|*|b|) sliding-window oracle."""
    ta, tb = normalize_tokens(a), normalize_tokens(b)
    for i in range(len(ta) - n + 1):
        window = ta[i : i + n]
        for j in range(len(tb) - n + 1):
            if tb[j : j + n] == window:
                return True
    return False


def snippet(file_name: str, functions: tuple[str, ...] = (), code: str = "def f(): pass") -> SeedSnippet:
    return SeedSnippet(file_name=file_name, function_names=functions, code=code)


class TestIngest:
    def write(self, tmp_path, lines: list[str]):
        path = tmp_path / "problems.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_three_valid_lines(self, tmp_path):
        lines = [
            json.dumps({"id": f"p{i}", "statement": f"statement {i}"}) for i in range(3)
        ]
        problems, report = ingest_problems(self.write(tmp_path, lines))
        assert [p.id for p in problems] == ["p0", "p1", "p2"]
        assert all(p.source == "collected" for p in problems)
        assert report.errors == [] and report.warnings == []

    def test_line_missing_statement_reported_with_line_number(self, tmp_path):
        lines = [
            json.dumps({"id": "p0", "statement": "fine"}),
            json.dumps({"id": "p1"}),
            json.dumps({"id": "p2", "statement": "also fine"}),
        ]
        problems, report = ingest_problems(self.write(tmp_path, lines))
        assert [p.id for p in problems] == ["p0", "p2"]
        assert len(report.errors) == 1
        assert report.errors[0].line_no == 2

    def test_duplicate_ids_first_wins_with_warning(self, tmp_path):
        lines = [
            json.dumps({"id": "dup", "statement": "first"}),
            json.dumps({"id": "dup", "statement": "second"}),
        ]
        problems, report = ingest_problems(self.write(tmp_path, lines))
        assert len(problems) == 1
        assert problems[0].statement == "first"
        assert len(report.warnings) == 1 and "dup" in report.warnings[0].message

    def test_unparseable_json_line(self, tmp_path):
        problems, report = ingest_problems(self.write(tmp_path, ["{not json"]))
        assert problems == [] and len(report.errors) == 1


class TestDedupSnippets:
    def test_same_file_name_keeps_first(self):
        kept = dedup_snippets([snippet("a.py", ("f",)), snippet("a.py", ("g",))])
        assert len(kept) == 1 and kept[0].function_names == ("f",)

    def test_disjoint_names_all_kept(self):
        kept = dedup_snippets([snippet("a.py", ("f",)), snippet("b.py", ("g",))])
        assert len(kept) == 2

    def test_function_name_key_drops_later_snippet(self):
        a = snippet("f1.py", ("g",))
        b = snippet("f2.py", ("g",))
        kept = dedup_snippets([a, b])
        assert kept == [a]

    def test_order_stable(self):
        snippets = [snippet(f"{i}.py", (f"fn{i}",)) for i in range(5)]
        assert dedup_snippets(snippets) == snippets

    @given(
        st.lists(
            st.tuples(st.sampled_from("abcdef"), st.sampled_from("uvwxyz")),
            max_size=12,
        )
    )
    @settings(max_examples=80, deadline=None)
    def test_idempotent(self, keys):
        snippets = [snippet(f"{f}.py", (fn,)) for f, fn in keys]
        once = dedup_snippets(snippets)
        assert dedup_snippets(once) == once


class TestSynthesize:
    def test_scripted_statement(self):
        mock = MockBackend()
        mock.script_pattern(r"designing new programming problems", ["Implement X"])
        draft = synthesize_problem(snippet("s.py"), mock)
        assert isinstance(draft, CodeProblem)
        assert draft.statement == "Implement X"
        assert draft.source == "synthesized"
        assert draft.reference_solutions == ()
        assert draft.provenance["seed_file"] == "s.py"

    def test_empty_reply_is_failure_record(self):
        mock = MockBackend()
        mock.script_pattern(r".", ["   "])
        result = synthesize_problem(snippet("s.py"), mock)
        assert isinstance(result, SynthesisFailure)
        assert result.reason == "empty statement"

    def test_batch_of_ten_with_one_failure(self):
        mock = MockBackend()
        replies = [f"Problem {i}" for i in range(9)]
        replies.insert(4, "")  # fifth seed gets a refusal
        mock.script_pattern(r".", replies)
        results = [synthesize_problem(snippet(f"s{i}.py", code=f"code {i}"), mock) for i in range(10)]
        drafts = [r for r in results if isinstance(r, CodeProblem)]
        failures = [r for r in results if isinstance(r, SynthesisFailure)]
        assert len(drafts) == 9 and len(failures) == 1

    def test_backend_error_is_failure_record(self):
        result = synthesize_problem(snippet("s.py"), MockBackend())
        assert isinstance(result, SynthesisFailure)
        assert "backend error" in result.reason


class TestEvolve:
    def test_statement_replaced_and_original_preserved(self):
        mock = MockBackend()
        mock.script_pattern(r"Rewrite the programming problem", ["Harder version"])
        problem = make_problem(statement="Easy version")
        evolved = evolve_instruction(problem, mock)
        assert evolved.statement == "Harder version"
        assert evolved.provenance["pre_evolution_statement"] == "Easy version"
        assert evolved.id == problem.id

    def test_identical_rewrite_flagged_no_change(self):
        mock = MockBackend()
        mock.script_pattern(r".", ["Same text"])
        evolved = evolve_instruction(make_problem(statement="Same text"), mock)
        assert evolved.provenance.get("evolution_no_change") is True

    def test_backend_failure_passes_problem_through(self, caplog):
        problem = make_problem()
        evolved = evolve_instruction(problem, MockBackend())  # no scripts -> error
        assert evolved == problem


class TestFilter:
    def test_all_yes_accepted(self):
        mock = MockBackend()
        mock.script_pattern(r"Judge the programming instruction", ["yes/yes/yes"])
        decision = filter_problem(make_problem(), mock)
        assert decision.accepted

    def test_not_challenging_rejected(self):
        mock = MockBackend()
        mock.script_pattern(r".", ["yes/no/yes"])
        decision = filter_problem(make_problem(), mock)
        assert not decision.accepted
        assert decision.clear_intent and not decision.challenging and decision.self_contained

    def test_garbage_unparseable(self):
        decision = parse_filter_reply("the weather is nice")
        assert decision == FilterDecision(False, False, False, "unparseable", False)

    def test_labeled_form(self):
        decision = parse_filter_reply(
            "clear_intent: yes\nchallenging: YES\nself_contained: no\nbecause imports pandas"
        )
        assert (decision.clear_intent, decision.challenging, decision.self_contained) == (True, True, False)
        assert not decision.accepted

    def test_accepted_implies_all_three(self):
        for reply in ("yes/yes/yes", "no/yes/yes", "yes/yes/no"):
            decision = parse_filter_reply(reply)
            assert decision.accepted == (
                decision.clear_intent and decision.challenging and decision.self_contained
            )


def words(tag: str, n: int) -> str:
    return " ".join(f"{tag}{i}" for i in range(n))


class TestNgramOverlap:
    def test_identical_12_token_texts(self):
        text = words("w", 12)
        assert ngram_overlap(text, text, 10)

    def test_nine_shared_tokens_not_enough_for_ten(self):
        shared = words("s", 9)
        a = f"{words('a', 5)} {shared} {words('b', 5)}"
        b = f"{words('c', 5)} {shared} {words('d', 5)}"
        assert not ngram_overlap(a, b, 10)
        assert ngram_overlap(a, b, 9)
        assert naive_overlap(a, b, 10) is False
        assert naive_overlap(a, b, 9) is True

    def test_short_texts_no_window(self):
        assert not ngram_overlap("a b c", "a b c", 10)

    def test_normalization_case_insensitive(self):
        a = "Sort THE list OF values One two THREE four five Six"
        b = "sort the list of values one two three four five six"
        assert ngram_overlap(a, b, 10)

    def test_normalization_splits_punctuation_consistently(self):
        # "values," tokenizes as ["values", ","] on both sides regardless of spacing
        a = "alpha beta gamma delta epsilon zeta eta theta iota values,final"
        b = "alpha beta gamma delta epsilon zeta eta theta iota values , final"
        assert ngram_overlap(a, b, 10)

    def test_n_must_be_positive(self):
        with pytest.raises(ValidationError):
            ngram_overlap("a", "b", 0)

    @given(st.integers(1, 4), st.lists(st.sampled_from("abc"), max_size=14), st.lists(st.sampled_from("abc"), max_size=14))
    @settings(max_examples=150, deadline=None)
    def test_matches_naive_oracle(self, n, ta, tb):
        a, b = " ".join(ta), " ".join(tb)
        assert ngram_overlap(a, b, n) == naive_overlap(a, b, n)


class TestDecontaminate:
    def test_problem_equal_to_holdout_removed_with_witness(self):
        statement = words("q", 15)
        problem = make_problem(pid="p0", statement=statement)
        kept, removed = decontaminate([problem], [HoldoutDoc("h0", statement)])
        assert kept == []
        assert len(removed) == 1
        assert removed[0].holdout_id == "h0"
        assert removed[0].witness_gram.split()[:3] == ["q0", "q1", "q2"]

    def test_disjoint_vocabulary_all_kept(self):
        problems = [make_problem(pid=f"p{i}", statement=words(f"p{i}x", 12)) for i in range(5)]
        kept, removed = decontaminate(problems, [HoldoutDoc("h", words("z", 30))])
        assert len(kept) == 5 and removed == []

    def test_empty_holdout_rejected(self):
        with pytest.raises(ValidationError):
            decontaminate([make_problem()], [])

    def test_partition_matches_pairwise_oracle_with_planted_overlaps(self):
        rng = random.Random(99)
        vocab = [f"tok{i}" for i in range(120)]
        holdout = [
            HoldoutDoc(f"h{j}", " ".join(rng.choice(vocab) for _ in range(30))) for j in range(20)
        ]
        problems = []
        for i in range(100):
            text = " ".join(rng.choice(vocab) for _ in range(25))
            if i % 10 == 3:  # plant a 10-gram from some holdout
                src = rng.choice(holdout).text.split()
                start = rng.randrange(len(src) - 10)
                text += " " + " ".join(src[start : start + 10])
            problems.append(make_problem(pid=f"p{i}", statement=text))
        kept, removed = decontaminate(problems, holdout, n=10)
        removed_ids = {r.problem.id for r in removed}
        oracle_removed = {
            p.id for p in problems if any(naive_overlap(p.statement, h.text, 10) for h in holdout)
        }
        assert removed_ids == oracle_removed
        assert [p.id for p in kept] + sorted(removed_ids, key=lambda x: int(x[1:])) and len(kept) + len(removed) == 100
        # order preserved within each partition
        kept_indices = [int(p.id[1:]) for p in kept]
        assert kept_indices == sorted(kept_indices)

    def test_planted_9_10_11_gram_boundaries(self):
        base = words("h", 40)
        holdout = [HoldoutDoc("h0", base)]
        tokens = base.split()

        def with_planted(k: int, pid: str) -> CodeProblem:
            return make_problem(pid=pid, statement=words(f"{pid}p", 8) + " " + " ".join(tokens[:k]))

        kept, removed = decontaminate(
            [with_planted(9, "nine"), with_planted(10, "ten"), with_planted(11, "eleven")],
            holdout,
            n=10,
        )
        assert [p.id for p in kept] == ["nine"]
        assert sorted(r.problem.id for r in removed) == ["eleven", "ten"]

    def test_index_stores_normalization_rule(self):
        index = NGramIndex.build([HoldoutDoc("h", words("a", 12))], n=10)
        assert index.normalization == "lower-punct-split-v1"
        assert all(len(g) == 10 for g in index.grams)
