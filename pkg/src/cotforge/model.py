"""Shared domain types and the tag-based chain-of-thought wire format.

The serialized form is the exact SFT training text: a chain delimited by
``<ChainOfThought>`` tags containing ``<thinking>`` / ``<reflection>``
segments (adjacent thinking steps joined with the ``<step>`` separator),
followed by a single newline and one fenced code block holding the final
answer. Serialization is byte-deterministic and parse inverts it exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Literal, NamedTuple

from .errors import CotParseError, TraceValidationError, ValidationError

CHAIN_OPEN = "<ChainOfThought>"
CHAIN_CLOSE = "</ChainOfThought>"
THINKING_OPEN = "<thinking>"
THINKING_CLOSE = "</thinking>"
REFLECTION_OPEN = "<reflection>"
REFLECTION_CLOSE = "</reflection>"
STEP_SEP = "<step>"

RESERVED_MARKERS = (
    CHAIN_OPEN,
    CHAIN_CLOSE,
    THINKING_OPEN,
    THINKING_CLOSE,
    REFLECTION_OPEN,
    REFLECTION_CLOSE,
    STEP_SEP,
)

DEFAULT_FENCE_LANGUAGE = "python"
DEFAULT_TOKEN_LIMIT = 25_000
WHITESPACE_RULE = "whitespace-v1"

THINKING = "thinking"
REFLECTION = "reflection"

SegmentKind = Literal["thinking", "reflection"]
VerdictStatus = Literal[
    "passed", "failed", "timeout", "crashed", "output_overflow", "truncated_generation"
]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestCase:
    """One executable check: either stdin/stdout or an assertion expression."""

    kind: Literal["stdin_stdout", "expression_assert"]
    input: str = ""
    expected_output: str = ""
    assertion: str | None = None

    def validate(self) -> None:
        if self.kind == "stdin_stdout":
            if self.assertion:
                raise ValidationError("testcase_assertion_forbidden", "stdin_stdout carries no assertion")
        elif self.kind == "expression_assert":
            if not self.assertion:
                raise ValidationError("testcase_assertion_required", "expression_assert needs an assertion")
        else:
            raise ValidationError("testcase_kind", f"unknown kind {self.kind!r}")


@dataclass(frozen=True)
class CodeProblem:
    """A programming task, collected from open sources or synthesized."""

    id: str
    statement: str
    source: Literal["collected", "synthesized"] = "collected"
    difficulty: str | None = None
    test_cases: tuple[TestCase, ...] = ()
    reference_solutions: tuple[str, ...] = ()
    provenance: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("problem_id_required")
        if not self.statement:
            raise ValidationError("problem_statement_required")
        if self.source not in ("collected", "synthesized"):
            raise ValidationError("problem_source", f"unknown source {self.source!r}")
        for tc in self.test_cases:
            tc.validate()


@dataclass(frozen=True)
class TestFailure:
    test_index: int
    expected: str
    actual: str
    stderr_excerpt: str = ""


@dataclass(frozen=True)
class Verdict:
    """Structured outcome of sandboxed execution."""

    status: VerdictStatus
    tests_run: int = 0
    tests_passed: int = 0
    failures: tuple[TestFailure, ...] = ()
    duration_s: float = 0.0
    verification_path: str | None = None  # "direct" | "generated+judged"
    cause: str | None = None

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def validate(self) -> None:
        if (self.status == "passed") != (self.tests_run >= 1 and self.tests_passed == self.tests_run):
            raise ValidationError("verdict_passed_consistency")
        if self.status == "truncated_generation" and self.tests_run != 0:
            raise ValidationError("verdict_truncated_no_tests")


@dataclass(frozen=True)
class Segment:
    """A run of thinking steps or a single reflection."""

    kind: SegmentKind
    steps: tuple[str, ...]

    @staticmethod
    def thinking(*steps: str) -> "Segment":
        return Segment(THINKING, tuple(steps))

    @staticmethod
    def reflection(text: str) -> "Segment":
        return Segment(REFLECTION, (text,))


@dataclass(frozen=True)
class CotTrace:
    """An ordered reasoning trace plus the final code answer.

    Equality is structural over (problem_id, segments, final_code); the
    verdict and generation metadata are excluded, matching the round-trip
    contract of the wire format.
    """

    problem_id: str
    segments: tuple[Segment, ...]
    final_code: str
    verdict: Verdict | None = field(default=None, compare=False)
    generation_meta: dict[str, Any] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class TokenBudget:
    limit: int = DEFAULT_TOKEN_LIMIT
    counter: str = WHITESPACE_RULE

    def __post_init__(self) -> None:
        if self.limit <= 0:
            raise ValidationError("token_budget_positive", f"limit={self.limit}")
        if self.counter not in _TOKEN_COUNTERS:
            raise ValidationError("token_counter_unknown", self.counter)


# ---------------------------------------------------------------------------
# Token budgeting
# ---------------------------------------------------------------------------

_TOKEN_COUNTERS = {
    WHITESPACE_RULE: lambda text: len(text.split()),
}


def count_tokens(text: str, budget: TokenBudget | None = None) -> int:
    """Deterministic token count under the budget's counting rule.

    Monotone under concatenation: count(a + b) >= count(a).
    """
    rule = (budget or TokenBudget()).counter
    return _TOKEN_COUNTERS[rule](text)


def exceeds_budget(text: str, budget: TokenBudget) -> bool:
    return count_tokens(text, budget) > budget.limit


def truncate_to_budget(text: str, budget: TokenBudget) -> tuple[str, bool]:
    """Cut text at the budget boundary.

    Returns (text, False) when within budget, otherwise the prefix covering
    exactly ``budget.limit`` whitespace-delimited tokens and True. Cuts fall
    between tokens, never inside one.
    """
    spans = [m.span() for m in re.finditer(r"\S+", text)]
    if len(spans) <= budget.limit:
        return text, False
    end = spans[budget.limit - 1][1]
    return text[:end], True


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _contains_reserved_marker(text: str) -> str | None:
    for marker in RESERVED_MARKERS:
        if marker in text:
            return marker
    return None


def validate_trace(trace: CotTrace) -> None:
    """Raise TraceValidationError naming the first violated rule."""
    if not trace.segments:
        raise TraceValidationError("segments_nonempty", "trace has no segments")
    previous_kind: str | None = None
    for i, seg in enumerate(trace.segments):
        if seg.kind not in (THINKING, REFLECTION):
            raise TraceValidationError("segment_kind", f"segment {i}: unknown kind {seg.kind!r}")
        if seg.kind == THINKING and len(seg.steps) < 1:
            raise TraceValidationError("thinking_steps_nonempty", f"segment {i} has no steps")
        if seg.kind == REFLECTION and len(seg.steps) != 1:
            raise TraceValidationError(
                "reflection_single_step", f"segment {i} has {len(seg.steps)} steps"
            )
        if seg.kind == REFLECTION and previous_kind == REFLECTION:
            raise TraceValidationError("consecutive_reflections", f"segments {i - 1} and {i}")
        if seg.kind == THINKING and previous_kind == THINKING:
            # canonical form keeps thinking groups maximal; without this the
            # serialized bytes would not round-trip to the same segmentation
            raise TraceValidationError("consecutive_thinking_segments", f"segments {i - 1} and {i}")
        for step in seg.steps:
            marker = _contains_reserved_marker(step)
            if marker is not None:
                raise TraceValidationError(
                    "step_reserved_marker", f"segment {i} contains {marker!r}"
                )
        previous_kind = seg.kind
    for line in trace.final_code.splitlines():
        if line.startswith("```"):
            raise TraceValidationError("final_code_fence_safe", "code contains a fence line")
    if trace.verdict is not None:
        trace.verdict.validate()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def fence_block(code: str, language: str = DEFAULT_FENCE_LANGUAGE) -> str:
    return f"```{language}\n{code}\n```"


def serialize_cot(trace: CotTrace) -> str:
    """Render a trace to the bit-exact training text.

    Equal traces produce identical bytes. Raises TraceValidationError on
    invariant violations.
    """
    validate_trace(trace)
    parts = [CHAIN_OPEN]
    for seg in trace.segments:
        if seg.kind == THINKING:
            parts.append(THINKING_OPEN + STEP_SEP.join(seg.steps) + THINKING_CLOSE)
        else:
            parts.append(REFLECTION_OPEN + seg.steps[0] + REFLECTION_CLOSE)
    parts.append(CHAIN_CLOSE)
    return "".join(parts) + "\n" + fence_block(trace.final_code)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_MARKER_RE = re.compile("|".join(re.escape(m) for m in RESERVED_MARKERS))
_FENCE_RE = re.compile(r"```([^\n`]*)\n")


class StepUnit(NamedTuple):
    """One tree-searchable unit: a single thinking step or one reflection."""

    kind: str  # "thinking" | "reflection"
    text: str


def _scan_chain(text: str, start: int, *, allow_partial: bool):
    """Scan the segment region after CHAIN_OPEN.

    Returns (units, complete_flags, close_end) where close_end is the offset
    just past CHAIN_CLOSE, or None when allow_partial and the text ended
    before the chain closed. complete_flags[i] is False only for a trailing
    unit whose terminating marker was never seen.
    """
    units: list[StepUnit] = []
    flags: list[bool] = []
    mode = "chain"  # chain | thinking | reflection
    pos = start
    raw_start = start
    while True:
        m = _MARKER_RE.search(text, pos)
        if m is None:
            if not allow_partial:
                tag = {"chain": "ChainOfThought", "thinking": "thinking", "reflection": "reflection"}[mode]
                raise CotParseError("unclosed_tag", len(text), f"<{tag}> never closed")
            if mode in ("thinking", "reflection"):
                units.append(StepUnit(THINKING if mode == "thinking" else REFLECTION, text[raw_start:]))
                flags.append(False)
            return units, flags, None
        tok = m.group()
        if mode == "chain":
            between = text[pos : m.start()]
            if between:
                raise CotParseError("unexpected_text", pos, f"stray text {between[:30]!r} between segments")
            if tok == THINKING_OPEN:
                mode = "thinking"
            elif tok == REFLECTION_OPEN:
                mode = "reflection"
            elif tok == CHAIN_CLOSE:
                return units, flags, m.end()
            elif tok == CHAIN_OPEN:
                raise CotParseError("nested_chain", m.start())
            else:
                raise CotParseError("unexpected_tag", m.start(), f"{tok} outside a segment")
            raw_start = m.end()
        elif mode == "thinking":
            if tok == STEP_SEP:
                units.append(StepUnit(THINKING, text[raw_start : m.start()]))
                flags.append(True)
                raw_start = m.end()
            elif tok == THINKING_CLOSE:
                units.append(StepUnit(THINKING, text[raw_start : m.start()]))
                flags.append(True)
                mode = "chain"
            else:
                raise CotParseError("interleaved_tags", m.start(), f"{tok} inside <thinking>")
        else:  # reflection
            if tok == REFLECTION_CLOSE:
                units.append(StepUnit(REFLECTION, text[raw_start : m.start()]))
                flags.append(True)
                mode = "chain"
            elif tok == STEP_SEP:
                raise CotParseError("step_in_reflection", m.start())
            else:
                raise CotParseError("interleaved_tags", m.start(), f"{tok} inside <reflection>")
        pos = m.end()


def _parse_code_tail(text: str, start: int) -> str:
    """Parse the mandatory newline + fenced code block after CHAIN_CLOSE."""
    tail = text[start:]
    if not tail.startswith("\n"):
        raise CotParseError("missing_final_code", start, "expected newline then fenced block")
    m = _FENCE_RE.match(tail, 1)
    if m is None:
        raise CotParseError("missing_final_code", start + 1, "no fenced code block")
    body_start = m.end()
    close = tail.find("\n```", body_start - 1)
    if close < 0:
        raise CotParseError("unterminated_fence", start + body_start)
    after = tail[close + 4 :]
    if after.strip():
        raise CotParseError("trailing_content", start + close + 4)
    return tail[body_start : close]


def units_to_segments(units: Iterable[StepUnit]) -> tuple[Segment, ...]:
    """Group consecutive thinking units into segments; reflections stand alone."""
    segments: list[Segment] = []
    pending: list[str] = []
    for unit in units:
        if unit.kind == THINKING:
            pending.append(unit.text)
        else:
            if pending:
                segments.append(Segment(THINKING, tuple(pending)))
                pending = []
            segments.append(Segment(REFLECTION, (unit.text,)))
    if pending:
        segments.append(Segment(THINKING, tuple(pending)))
    return tuple(segments)


def trace_units(trace: CotTrace) -> tuple[StepUnit, ...]:
    """Flatten a trace's segments into the unit sequence used by tree search."""
    units: list[StepUnit] = []
    for seg in trace.segments:
        if seg.kind == THINKING:
            units.extend(StepUnit(THINKING, s) for s in seg.steps)
        else:
            units.append(StepUnit(REFLECTION, seg.steps[0]))
    return tuple(units)


def parse_cot(text: str, problem_id: str = "") -> CotTrace:
    """Inverse of serialize_cot.

    For any valid trace t, parse_cot(serialize_cot(t)) == t structurally
    (verdict and metadata excluded). Malformed input raises CotParseError
    with a byte offset and a distinct error code.
    """
    if not text.startswith(CHAIN_OPEN):
        raise CotParseError("missing_chain_open", 0)
    units, _, close_end = _scan_chain(text, len(CHAIN_OPEN), allow_partial=False)
    assert close_end is not None
    code = _parse_code_tail(text, close_end)
    trace = CotTrace(problem_id=problem_id, segments=units_to_segments(units), final_code=code)
    validate_trace(trace)
    return trace


def serialize_step_prefix(units: Iterable[StepUnit]) -> str:
    """Serialize a unit path as an open (in-progress) chain prefix.

    The result is always a byte-prefix of serialize_cot over any trace that
    extends the path, so sampled continuations concatenate exactly.
    """
    units = list(units)
    parts = [CHAIN_OPEN]
    i = 0
    while i < len(units):
        unit = units[i]
        if unit.kind == THINKING:
            j = i
            while j < len(units) and units[j].kind == THINKING:
                j += 1
            parts.append(THINKING_OPEN + STEP_SEP.join(u.text for u in units[i:j]))
            if j < len(units):
                parts.append(THINKING_CLOSE)
            i = j
        else:
            parts.append(REFLECTION_OPEN + unit.text + REFLECTION_CLOSE)
            i += 1
    return "".join(parts)


def parse_step_prefix(text: str) -> tuple[StepUnit, ...]:
    """Parse an open chain prefix back into its unit path.

    Inverse of serialize_step_prefix on its image: trailing raw text inside
    an open thinking segment is the final (complete) step.
    """
    if not text.startswith(CHAIN_OPEN):
        raise CotParseError("missing_chain_open", 0)
    units, _, close_end = _scan_chain(text, len(CHAIN_OPEN), allow_partial=True)
    if close_end is not None:
        raise CotParseError("not_a_prefix", close_end, "prefix must not close the chain")
    return tuple(units)


def scan_units_lenient(text: str) -> tuple[tuple[StepUnit, ...], str | None]:
    """Best-effort scan of possibly-truncated chain text.

    Returns the complete units (a trailing unit whose terminating marker was
    cut off is dropped) and the final code if an intact code block follows a
    closed chain, else None. Raises only on structurally interleaved tags,
    not on truncation.
    """
    if not text.startswith(CHAIN_OPEN):
        return (), None
    units, flags, close_end = _scan_chain(text, len(CHAIN_OPEN), allow_partial=True)
    complete = tuple(u for u, ok in zip(units, flags) if ok)
    if close_end is None:
        return complete, None
    try:
        code = _parse_code_tail(text, close_end)
    except CotParseError:
        return complete, None
    return complete, code


class ExtractedCode(NamedTuple):
    code: str
    language: str
    unterminated: bool


def extract_last_code_block(text: str) -> ExtractedCode | None:
    """Contents of the final fenced code block in arbitrary text.

    Returns None when no fenced block exists. An unterminated final fence
    yields everything to end-of-text with the ``unterminated`` flag set.
    """
    opens = [(m.start(), m.end(), m.group(1)) for m in _FENCE_RE.finditer(text)]
    if not opens:
        return None
    blocks: list[ExtractedCode] = []
    i = 0
    while i < len(opens):
        start, body_start, lang = opens[i]
        close = text.find("\n```", body_start - 1)
        if close < 0 or close < start:
            blocks.append(ExtractedCode(text[body_start:], lang.strip(), True))
            break
        blocks.append(ExtractedCode(text[body_start:close], lang.strip(), False))
        resume = close + 4
        while i < len(opens) and opens[i][0] < resume:
            i += 1
    return blocks[-1] if blocks else None


# ---------------------------------------------------------------------------
# JSONL record schemas
# ---------------------------------------------------------------------------


def test_case_to_dict(tc: TestCase) -> dict:
    return {
        "kind": tc.kind,
        "input": tc.input,
        "expected_output": tc.expected_output,
        "assertion": tc.assertion,
    }


def test_case_from_dict(d: dict) -> TestCase:
    tc = TestCase(
        kind=d["kind"],
        input=d.get("input", ""),
        expected_output=d.get("expected_output", ""),
        assertion=d.get("assertion"),
    )
    tc.validate()
    return tc


def problem_to_dict(p: CodeProblem) -> dict:
    return {
        "id": p.id,
        "statement": p.statement,
        "source": p.source,
        "difficulty": p.difficulty,
        "test_cases": [test_case_to_dict(tc) for tc in p.test_cases],
        "reference_solutions": list(p.reference_solutions),
        "provenance": p.provenance,
    }


def problem_from_dict(d: dict) -> CodeProblem:
    p = CodeProblem(
        id=d["id"],
        statement=d["statement"],
        source=d.get("source", "collected"),
        difficulty=d.get("difficulty"),
        test_cases=tuple(test_case_from_dict(tc) for tc in d.get("test_cases", [])),
        reference_solutions=tuple(d.get("reference_solutions", [])),
        provenance=dict(d.get("provenance", {})),
    )
    p.validate()
    return p


def verdict_to_dict(v: Verdict) -> dict:
    return {
        "status": v.status,
        "tests_run": v.tests_run,
        "tests_passed": v.tests_passed,
        "failures": [
            {
                "test_index": f.test_index,
                "expected": f.expected,
                "actual": f.actual,
                "stderr_excerpt": f.stderr_excerpt,
            }
            for f in v.failures
        ],
        "duration_s": v.duration_s,
        "verification_path": v.verification_path,
        "cause": v.cause,
    }


def verdict_from_dict(d: dict) -> Verdict:
    return Verdict(
        status=d["status"],
        tests_run=d.get("tests_run", 0),
        tests_passed=d.get("tests_passed", 0),
        failures=tuple(
            TestFailure(
                test_index=f["test_index"],
                expected=f.get("expected", ""),
                actual=f.get("actual", ""),
                stderr_excerpt=f.get("stderr_excerpt", ""),
            )
            for f in d.get("failures", [])
        ),
        duration_s=d.get("duration_s", 0.0),
        verification_path=d.get("verification_path"),
        cause=d.get("cause"),
    )


def trace_to_dict(t: CotTrace) -> dict:
    return {
        "problem_id": t.problem_id,
        "segments": [{"kind": s.kind, "steps": list(s.steps)} for s in t.segments],
        "final_code": t.final_code,
        "verdict": verdict_to_dict(t.verdict) if t.verdict else None,
        "generation_meta": t.generation_meta,
    }


def trace_from_dict(d: dict) -> CotTrace:
    trace = CotTrace(
        problem_id=d["problem_id"],
        segments=tuple(Segment(s["kind"], tuple(s["steps"])) for s in d["segments"]),
        final_code=d["final_code"],
        verdict=verdict_from_dict(d["verdict"]) if d.get("verdict") else None,
        generation_meta=dict(d.get("generation_meta", {})),
    )
    validate_trace(trace)
    return trace


def with_verdict(trace: CotTrace, verdict: Verdict) -> CotTrace:
    return replace(trace, verdict=verdict)


def dump_jsonl_line(record: dict) -> str:
    """One UTF-8 JSON object, newline terminated, stable key order."""
    return json.dumps(record, ensure_ascii=False) + "\n"
