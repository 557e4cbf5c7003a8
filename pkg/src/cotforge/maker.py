"""Stage 2: the three-agent workflow producing execution-verified traces.

A thinking agent reasons stepwise toward a code answer, a reflection agent
gates continuation vs. emission and writes error-analysis reports from
execution feedback, and the executor verifies each candidate. The loop is
bounded by a feedback-attempt threshold. Successful runs are pruned (all
per-step gate chatter dropped, only post-execution reflections kept) and
returned as serializable traces; failed runs return an auditable record.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Protocol

from .backend import Backend, CompletionRequest, Message, system_message, user_message
from .errors import BackendError, SandboxEnvironmentError, ValidationError, WorkflowInterrupted
from .model import (
    REFLECTION,
    RESERVED_MARKERS,
    STEP_SEP,
    THINKING,
    CodeProblem,
    CotTrace,
    Segment,
    Verdict,
    extract_last_code_block,
    validate_trace,
)
from .prompts import render_prompt
from .textnorm import has_ngram_overlap, redact_ngram_overlaps

logger = logging.getLogger(__name__)

CONTINUE_REASONING = "continue_reasoning"
EMIT_ANSWER = "emit_answer"

LEAK_NGRAM_N = 10
FALLBACK_REPORT = "The execution failed but no analysis is available; rework the solution from scratch."


class Executor(Protocol):
    def verify(self, problem: CodeProblem, code: str) -> Verdict: ...


@dataclass(frozen=True)
class WorkflowConfig:
    max_feedback_attempts: int = 3
    provide_reference_after: int = 2
    temperature: float = 0.2
    max_tokens: int = 4096
    max_gate_rounds: int = 8

    def validate(self) -> None:
        if self.max_feedback_attempts < 1:
            raise ValidationError("workflow_attempts_min")
        if not (1 <= self.provide_reference_after <= self.max_feedback_attempts):
            raise ValidationError("workflow_reference_after_range")
        if self.max_gate_rounds < 1:
            raise ValidationError("workflow_gate_rounds_min")


@dataclass(frozen=True)
class TranscriptEvent:
    kind: str  # thinking | gate | code | execution | reflection
    attempt: int
    text: str = ""
    steps: tuple[str, ...] = ()
    verdict: Verdict | None = None

    def to_dict(self) -> dict:
        from .model import verdict_to_dict

        return {
            "kind": self.kind,
            "attempt": self.attempt,
            "text": self.text,
            "steps": list(self.steps),
            "verdict": verdict_to_dict(self.verdict) if self.verdict else None,
        }


@dataclass
class Transcript:
    problem_id: str
    events: list[TranscriptEvent] = field(default_factory=list)

    def add(self, event: TranscriptEvent) -> None:
        self.events.append(event)

    @staticmethod
    def from_trace(trace: CotTrace) -> "Transcript":
        """Embed a pruned trace back into transcript form (no gate events)."""
        t = Transcript(problem_id=trace.problem_id)
        for seg in trace.segments:
            if seg.kind == THINKING:
                t.add(TranscriptEvent("thinking", attempt=1, steps=seg.steps))
            else:
                t.add(TranscriptEvent("reflection", attempt=1, text=seg.steps[0]))
        t.add(TranscriptEvent("code", attempt=1, text=trace.final_code))
        t.add(
            TranscriptEvent(
                "execution",
                attempt=1,
                verdict=trace.verdict or Verdict(status="passed", tests_run=1, tests_passed=1),
            )
        )
        return t


@dataclass
class WorkflowState:
    """Where a problem's workflow currently stands; carried in abort snapshots."""

    phase: str = "thinking"  # thinking | reflecting_on_step | executing |
    # reflecting_on_failure | done_success | done_failure
    attempt: int = 0
    transcript: Transcript | None = None


@dataclass(frozen=True)
class ErrorAnalysisReport:
    text: str
    derived_from: dict[str, Any]


@dataclass(frozen=True)
class FailureRecord:
    problem_id: str
    attempts: int
    reason: str
    transcript: Transcript
    last_verdict: Verdict | None


# ---------------------------------------------------------------------------
# Reply normalization
# ---------------------------------------------------------------------------

_MARKER_STRIP_RE = re.compile("|".join(re.escape(m) for m in RESERVED_MARKERS if m != STEP_SEP))


def sanitize_step_text(text: str) -> str:
    """Remove format-control markers an agent must never inject into a step."""
    return _MARKER_STRIP_RE.sub("", text)


def split_steps(reply: str) -> tuple[str, ...]:
    """Split a thinking reply on the step separator; a bare reply is one step."""
    steps = [sanitize_step_text(part).strip() for part in reply.split(STEP_SEP)]
    return tuple(s for s in steps if s)


def verdict_summary(verdict: Verdict) -> str:
    parts = [f"status={verdict.status}", f"tests passed {verdict.tests_passed}/{verdict.tests_run}"]
    for f in verdict.failures[:3]:
        parts.append(f"test {f.test_index}: expected {f.expected!r} got {f.actual!r}")
        if f.stderr_excerpt:
            parts.append(f"stderr: {f.stderr_excerpt[:200]}")
    if verdict.cause:
        parts.append(f"cause: {verdict.cause}")
    return "; ".join(parts)


# ---------------------------------------------------------------------------
# Prompt assembly (exposed so tests can script exact requests)
# ---------------------------------------------------------------------------


def render_transcript(transcript: Transcript) -> str:
    parts: list[str] = []
    for event in transcript.events:
        if event.kind == "thinking":
            parts.append("[reasoning]\n" + "\n".join(event.steps))
        elif event.kind == "code":
            parts.append("[candidate answer]\n" + event.text)
        elif event.kind == "execution" and event.verdict is not None:
            parts.append("[execution feedback]\n" + verdict_summary(event.verdict))
        elif event.kind == "reflection":
            parts.append("[error analysis]\n" + event.text)
    return "\n\n".join(parts)


def thinking_messages(problem: CodeProblem, transcript: Transcript, prompt_dir=None) -> tuple[Message, ...]:
    context = render_transcript(transcript)
    body = problem.statement
    if context:
        body += "\n\n" + context
    body += "\n\nContinue the reasoning with the next step(s). Separate adjacent steps with <step>. Do not output the final code yet."
    return (system_message(render_prompt("thinking_system", prompt_dir)), user_message(body))


def code_messages(problem: CodeProblem, transcript: Transcript, prompt_dir=None) -> tuple[Message, ...]:
    context = render_transcript(transcript)
    body = problem.statement
    if context:
        body += "\n\n" + context
    body += "\n\nOutput the code answer now as one fenced Python code block."
    return (system_message(render_prompt("thinking_system", prompt_dir)), user_message(body))


def gate_messages(problem: CodeProblem, transcript: Transcript, prompt_dir=None) -> tuple[Message, ...]:
    context = render_transcript(transcript)
    body = problem.statement + "\n\n" + context + "\n\nReply CONTINUE or EMIT."
    return (system_message(render_prompt("gate", prompt_dir)), user_message(body))


def reflection_messages(
    problem: CodeProblem,
    code: str,
    verdict: Verdict,
    reference: str | None,
    prompt_dir=None,
) -> tuple[Message, ...]:
    reference_section = ""
    if reference is not None:
        reference_section = (
            "\nA known-correct answer follows. Use it only to diagnose the candidate's"
            " mistake; never quote it.\n" + reference + "\n"
        )
    body = render_prompt(
        "failure_reflection",
        prompt_dir,
        statement=problem.statement,
        code=code,
        verdict=verdict_summary(verdict),
        reference_section=reference_section,
    )
    return (user_message(body),)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def parse_gate_reply(reply: str) -> str:
    """EMIT/CONTINUE decision; anything unparseable conservatively continues."""
    text = reply.strip()
    emit = re.search(r"\bEMIT\b", text, re.IGNORECASE)
    cont = re.search(r"\bCONTINUE\b", text, re.IGNORECASE)
    if emit and not cont:
        return EMIT_ANSWER
    if cont and not emit:
        return CONTINUE_REASONING
    if emit and cont:
        return EMIT_ANSWER if emit.start() < cont.start() else CONTINUE_REASONING
    logger.warning("unparseable gate reply %r; continuing reasoning", text[:80])
    return CONTINUE_REASONING


def gate_step(
    problem: CodeProblem,
    transcript: Transcript,
    backend: Backend,
    config: WorkflowConfig | None = None,
    prompt_dir=None,
) -> str:
    config = config or WorkflowConfig()
    reply = backend.complete(
        CompletionRequest(
            messages=gate_messages(problem, transcript, prompt_dir),
            temperature=0.0,
            max_tokens=16,
        )
    ).samples[0]
    return parse_gate_reply(reply)


def reflect_on_failure(
    problem: CodeProblem,
    code: str,
    verdict: Verdict,
    reference: str | None,
    backend: Backend,
    config: WorkflowConfig | None = None,
    prompt_dir=None,
) -> ErrorAnalysisReport:
    """Error-analysis report from execution feedback.

    When a reference solution is supplied the report must not contain any
    10-gram of it: one regeneration is attempted, then matching spans are
    redacted.
    """
    config = config or WorkflowConfig()
    messages = reflection_messages(problem, code, verdict, reference, prompt_dir)
    request = CompletionRequest(messages=messages, temperature=config.temperature, max_tokens=config.max_tokens)
    text = backend.complete(request).samples[0].strip()
    regenerated = False
    if reference is not None and text and has_ngram_overlap(text, reference, LEAK_NGRAM_N):
        logger.warning("reflection for %s quotes the reference; regenerating", problem.id)
        regenerated = True
        text = backend.complete(request).samples[0].strip()
        if has_ngram_overlap(text, reference, LEAK_NGRAM_N):
            text = redact_ngram_overlaps(text, reference, LEAK_NGRAM_N)
    text = sanitize_step_text(text).strip() or FALLBACK_REPORT
    return ErrorAnalysisReport(
        text=text,
        derived_from={
            "verdict": verdict_summary(verdict),
            "candidate_code_chars": len(code),
            "reference_used": reference is not None,
            "regenerated": regenerated,
        },
    )


def prune_trivial_reflections(transcript: Transcript | CotTrace, final_code: str | None = None) -> CotTrace:
    """Collapse a workflow transcript into the canonical trace.

    Gate events are dropped entirely, adjacent thinking runs merge into one
    segment, failed candidate answers stay as the last step of their
    thinking segment, and only post-execution reflections survive. Accepts a
    trace as input too, where it is the identity (idempotent).
    """
    if isinstance(transcript, CotTrace):
        transcript = Transcript.from_trace(transcript)
    events = transcript.events
    pending: list[str] = []
    segments: list[Segment] = []
    code_text: str | None = final_code

    def flush() -> None:
        nonlocal pending
        if pending:
            segments.append(Segment(THINKING, tuple(pending)))
            pending = []

    for i, event in enumerate(events):
        if event.kind == "thinking":
            pending.extend(event.steps)
        elif event.kind == "reflection":
            flush()
            segments.append(Segment(REFLECTION, (event.text,)))
        elif event.kind == "code":
            verdict = _next_execution_verdict(events, i)
            if verdict is not None and verdict.passed:
                block = extract_last_code_block(event.text)
                code_text = block.code if block else event.text.strip()
            else:
                step = sanitize_step_text(event.text).strip()
                if step:
                    pending.append(step)
    flush()
    trace = CotTrace(
        problem_id=transcript.problem_id,
        segments=tuple(segments),
        final_code=code_text if code_text is not None else "",
    )
    validate_trace(trace)
    return trace


def _next_execution_verdict(events: list[TranscriptEvent], index: int) -> Verdict | None:
    for event in events[index + 1 :]:
        if event.kind == "execution":
            return event.verdict
    return None


def make_trace(
    problem: CodeProblem,
    config: WorkflowConfig,
    thinking_backend: Backend,
    reflection_backend: Backend,
    executor: Executor,
    prompt_dir=None,
) -> CotTrace | FailureRecord:
    """Drive the full workflow for one problem.

    Performs at most ``max_feedback_attempts`` executions and always
    terminates. Success returns the pruned trace with its verdict attached;
    exhaustion returns a FailureRecord carrying the full transcript.
    Backend/executor infrastructure errors raise WorkflowInterrupted with a
    resumable state snapshot.
    """
    config.validate()
    transcript = Transcript(problem_id=problem.id)
    state = WorkflowState(phase="thinking", attempt=0, transcript=transcript)
    last_verdict: Verdict | None = None
    try:
        for attempt in range(1, config.max_feedback_attempts + 1):
            state.attempt = attempt
            rounds = 0
            while True:
                rounds += 1
                state.phase = "thinking"
                reply = thinking_backend.complete(
                    CompletionRequest(
                        messages=thinking_messages(problem, transcript, prompt_dir),
                        temperature=config.temperature,
                        max_tokens=config.max_tokens,
                    )
                ).samples[0]
                steps = split_steps(reply)
                if not steps:
                    raise WorkflowInterrupted(
                        f"thinking agent returned no usable steps for {problem.id}",
                        snapshot=_snapshot(problem, state),
                    )
                transcript.add(TranscriptEvent("thinking", attempt=attempt, text=reply, steps=steps))
                state.phase = "reflecting_on_step"
                if rounds >= config.max_gate_rounds:
                    logger.warning("gate round cap reached for %s; forcing emission", problem.id)
                    decision = EMIT_ANSWER
                else:
                    decision = gate_step(problem, transcript, reflection_backend, config, prompt_dir)
                transcript.add(TranscriptEvent("gate", attempt=attempt, text=decision))
                if decision == EMIT_ANSWER:
                    break
            state.phase = "executing"
            code_reply = thinking_backend.complete(
                CompletionRequest(
                    messages=code_messages(problem, transcript, prompt_dir),
                    temperature=config.temperature,
                    max_tokens=config.max_tokens,
                )
            ).samples[0]
            block = extract_last_code_block(code_reply)
            code = block.code if block else code_reply.strip()
            transcript.add(TranscriptEvent("code", attempt=attempt, text=code_reply))
            verdict = executor.verify(problem, code)
            last_verdict = verdict
            transcript.add(TranscriptEvent("execution", attempt=attempt, verdict=verdict))
            if verdict.passed:
                state.phase = "done_success"
                trace = prune_trivial_reflections(transcript)
                return CotTrace(
                    problem_id=trace.problem_id,
                    segments=trace.segments,
                    final_code=trace.final_code,
                    verdict=verdict,
                    generation_meta={
                        "thinking_backend": thinking_backend.backend_id,
                        "reflection_backend": reflection_backend.backend_id,
                        "attempts": attempt,
                        "temperature": config.temperature,
                    },
                )
            if attempt < config.max_feedback_attempts:
                state.phase = "reflecting_on_failure"
                reference = None
                if problem.reference_solutions and (attempt + 1) >= config.provide_reference_after:
                    reference = problem.reference_solutions[0]
                report = reflect_on_failure(
                    problem, code, verdict, reference, reflection_backend, config, prompt_dir
                )
                transcript.add(TranscriptEvent("reflection", attempt=attempt, text=report.text))
    except WorkflowInterrupted:
        raise
    except (BackendError, SandboxEnvironmentError, OSError) as exc:
        raise WorkflowInterrupted(
            f"infrastructure failure for {problem.id}: {exc}",
            snapshot=_snapshot(problem, state),
        ) from exc
    state.phase = "done_failure"
    return FailureRecord(
        problem_id=problem.id,
        attempts=config.max_feedback_attempts,
        reason="attempts_exhausted",
        transcript=transcript,
        last_verdict=last_verdict,
    )


def _snapshot(problem: CodeProblem, state: WorkflowState) -> dict:
    events = state.transcript.events if state.transcript else []
    return {
        "problem_id": problem.id,
        "phase": state.phase,
        "attempt": state.attempt,
        "events": [e.to_dict() for e in events],
    }
