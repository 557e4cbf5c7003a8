"""Execution agent: verify candidate code in isolated subprocesses.

Problems with executable tests are run directly; problems without tests get
LLM-generated test code whose execution output is judged by an LLM critic.
Each test job runs in a fresh subprocess via the shim protocol (job JSON on
stdin, verdict JSON + sentinel line on stdout), so candidate state never
leaks between tests and a hung candidate can always be killed as a group.
"""

from __future__ import annotations

import json
import logging
import os
import re
import signal
import subprocess
import sys
import tempfile
import uuid
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

from .backend import Backend, CompletionRequest, user_message
from .errors import SandboxEnvironmentError, TestGenerationError, ValidationError
from .model import CodeProblem, TestCase, TestFailure, Verdict, extract_last_code_block
from .prompts import render_prompt

logger = logging.getLogger(__name__)

DEFAULT_SHIM_CMD = (sys.executable, "-I", "-m", "cotforge_shim")

PATH_DIRECT = "direct"
PATH_GENERATED = "generated+judged"


@dataclass(frozen=True)
class SandboxLimits:
    wall_time_s: float = 10.0
    cpu_time_s: float = 10.0
    memory_bytes: int = 512 * 1024 * 1024
    max_output_bytes: int = 1024 * 1024
    network: Literal["denied"] = "denied"

    def validate(self) -> None:
        for name in ("wall_time_s", "cpu_time_s", "memory_bytes", "max_output_bytes"):
            if getattr(self, name) <= 0:
                raise ValidationError("sandbox_limit_positive", name)
        if self.network != "denied":
            raise ValidationError("sandbox_network_denied")

    def job_limits(self) -> dict:
        return {
            "cpu_time_s": self.cpu_time_s,
            "memory_bytes": self.memory_bytes,
            "max_output_bytes": self.max_output_bytes,
        }


@dataclass(frozen=True)
class GeneratedTestBundle:
    test_code: str
    generator_backend: str
    judged_by: str | None = None


@dataclass(frozen=True)
class CriticJudgement:
    correct: bool
    rationale: str


class ShimOutcome(NamedTuple):
    verdict: dict | None
    timed_out: bool
    returncode: int | None
    stderr_tail: str


def normalize_output(text: str) -> str:
    """Trailing whitespace per line and trailing blank lines are insignificant."""
    lines = [line.rstrip() for line in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def run_shim_job(job: dict, limits: SandboxLimits, shim_cmd: Sequence[str] | None = None) -> ShimOutcome:
    """Run one job in a fresh shim subprocess; never hangs past the wall limit.

    Raises SandboxEnvironmentError when the shim cannot be spawned or breaks
    protocol (exit > 0 or missing sentinel on a clean exit) - distinct from
    candidate failures, which come back inside the verdict.
    """
    cmd = list(shim_cmd or DEFAULT_SHIM_CMD)
    sentinel = f"SHIM-{uuid.uuid4().hex}"
    job = dict(job, sentinel=sentinel, limits=limits.job_limits())
    with tempfile.TemporaryDirectory(prefix="cotforge-sandbox-") as workdir:
        try:
            proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=workdir,
                start_new_session=True,
                text=True,
            )
        except OSError as exc:
            raise SandboxEnvironmentError(f"cannot spawn sandbox shim {cmd}: {exc}") from exc
        try:
            out, err = proc.communicate(json.dumps(job), timeout=limits.wall_time_s)
            timed_out = False
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            out, err = proc.communicate()
            timed_out = True
    stderr_tail = (err or "")[-2000:]
    if timed_out:
        return ShimOutcome(None, True, proc.returncode, stderr_tail)

    verdict = _find_verdict(out or "", sentinel)
    rc = proc.returncode
    if verdict is None:
        if rc is not None and rc < 0:
            # killed by a signal (OOM killer, SIGKILL, ...): candidate crash
            return ShimOutcome(None, False, rc, stderr_tail)
        raise SandboxEnvironmentError(
            f"shim protocol failure (rc={rc}, no sentinel): {stderr_tail[:400]}"
        )
    return ShimOutcome(verdict, False, rc, stderr_tail)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        try:
            proc.kill()
        except OSError:
            pass


def _find_verdict(out: str, sentinel: str) -> dict | None:
    lines = out.splitlines()
    for i, line in enumerate(lines):
        if line == sentinel and i > 0:
            try:
                return json.loads(lines[i - 1])
            except ValueError:
                return None
    return None


# ---------------------------------------------------------------------------
# Direct execution against test cases
# ---------------------------------------------------------------------------


def _job_for_test(code: str, test: TestCase) -> dict:
    test.validate()
    if test.kind == "stdin_stdout":
        return {"mode": "stdin_stdout", "code": code, "input": test.input}
    return {"mode": "expression_assert", "code": code, "assertion": test.assertion, "input": test.input}


def run_candidate(
    code: str,
    tests: Sequence[TestCase],
    limits: SandboxLimits | None = None,
    shim_cmd: Sequence[str] | None = None,
) -> Verdict:
    """Execute code against every test, one fresh subprocess per test."""
    limits = limits or SandboxLimits()
    limits.validate()
    if not tests:
        raise ValidationError("tests_nonempty", "run_candidate needs at least one test")
    failures: list[TestFailure] = []
    statuses: list[str] = []
    passed = 0
    total_elapsed = 0.0
    for index, test in enumerate(tests):
        outcome = run_shim_job(_job_for_test(code, test), limits, shim_cmd)
        if outcome.timed_out:
            statuses.append("timeout")
            failures.append(TestFailure(index, test.expected_output, "", "wall-time limit exceeded"))
            total_elapsed += limits.wall_time_s
            continue
        if outcome.verdict is None:
            statuses.append("crashed")
            failures.append(TestFailure(index, test.expected_output, "", outcome.stderr_tail))
            continue
        verdict = outcome.verdict
        total_elapsed += float(verdict.get("elapsed_s", 0.0))
        if verdict.get("stdout_overflow"):
            statuses.append("output_overflow")
            failures.append(TestFailure(index, test.expected_output, verdict.get("stdout", "")[:1000], "output limit exceeded"))
            continue
        if verdict.get("exception_type") == "MemoryError":
            statuses.append("crashed")
            failures.append(TestFailure(index, test.expected_output, "", verdict.get("stderr_excerpt", "")))
            continue
        if not verdict.get("ok"):
            statuses.append("failed")
            failures.append(
                TestFailure(index, test.expected_output, verdict.get("stdout", "")[:1000], verdict.get("stderr_excerpt", ""))
            )
            continue
        if test.kind == "stdin_stdout":
            actual = verdict.get("stdout", "")
            if normalize_output(actual) == normalize_output(test.expected_output):
                passed += 1
                statuses.append("passed")
            else:
                statuses.append("failed")
                failures.append(TestFailure(index, test.expected_output, actual[:1000], verdict.get("stderr_excerpt", "")))
        else:
            passed += 1
            statuses.append("passed")

    if "timeout" in statuses:
        status = "timeout"
    elif "crashed" in statuses:
        status = "crashed"
    elif "output_overflow" in statuses:
        status = "output_overflow"
    elif passed == len(tests):
        status = "passed"
    else:
        status = "failed"
    return Verdict(
        status=status,
        tests_run=len(tests),
        tests_passed=passed,
        failures=tuple(failures),
        duration_s=round(total_elapsed, 6),
        verification_path=PATH_DIRECT,
    )


def dry_parse(code: str, limits: SandboxLimits | None = None, shim_cmd: Sequence[str] | None = None) -> tuple[bool, str | None]:
    """Compile-only check in the sandbox; returns (ok, exception_type)."""
    limits = limits or SandboxLimits()
    outcome = run_shim_job({"mode": "dry_parse", "code": code}, limits, shim_cmd)
    if outcome.timed_out or outcome.verdict is None:
        return False, "crashed"
    return bool(outcome.verdict.get("ok")), outcome.verdict.get("exception_type")


# ---------------------------------------------------------------------------
# LLM-generated tests and LLM-as-critic judging
# ---------------------------------------------------------------------------


def generate_tests(
    problem: CodeProblem,
    candidate_code: str,
    backend: Backend,
    limits: SandboxLimits | None = None,
    shim_cmd: Sequence[str] | None = None,
    prompt_dir=None,
    max_retries: int = 2,
    validate_against_reference: bool = True,
) -> GeneratedTestBundle:
    """LLM-authored executable test code, dry-parsed before acceptance.

    When a reference solution exists, generated tests the reference fails are
    presumed wrong, discarded with a log line, and regenerated within the
    same retry budget. Exhausting retries raises TestGenerationError.
    """
    if problem.test_cases:
        raise ValidationError("generate_tests_precondition", "problem already has executable tests")
    limits = limits or SandboxLimits()
    prompt = render_prompt("test_generation", prompt_dir, statement=problem.statement, code=candidate_code)
    attempts = max_retries + 1
    last_reason = "no attempts made"
    for _ in range(attempts):
        reply = backend.complete(CompletionRequest(messages=(user_message(prompt),), temperature=0.2)).samples[0]
        block = extract_last_code_block(reply)
        test_code = block.code if block else reply.strip()
        if not test_code:
            last_reason = "empty test code"
            continue
        ok, exception_type = dry_parse(test_code, limits, shim_cmd)
        if not ok:
            last_reason = f"dry parse failed: {exception_type}"
            continue
        if validate_against_reference and problem.reference_solutions:
            reference_outcome = run_shim_job(
                {"mode": "run_test_code", "code": problem.reference_solutions[0], "test_code": test_code},
                limits,
                shim_cmd,
            )
            if reference_outcome.verdict is None or not reference_outcome.verdict.get("ok"):
                logger.info("discarding generated tests for %s: reference solution fails them", problem.id)
                last_reason = "reference solution fails generated tests"
                continue
        return GeneratedTestBundle(test_code=test_code, generator_backend=backend.backend_id)
    raise TestGenerationError(f"test generation failed for {problem.id}: {last_reason}")


_INCORRECT_RE = re.compile(r"\bINCORRECT\b", re.IGNORECASE)
_CORRECT_RE = re.compile(r"\bCORRECT\b", re.IGNORECASE)


def parse_critic_reply(reply: str) -> CriticJudgement:
    text = reply.strip()
    if _INCORRECT_RE.search(text):
        rationale = _INCORRECT_RE.sub("", text, count=1).strip(" :.-\n") or "judged incorrect"
        return CriticJudgement(False, rationale)
    if _CORRECT_RE.search(text):
        rationale = _CORRECT_RE.sub("", text, count=1).strip(" :.-\n") or "judged correct"
        return CriticJudgement(True, rationale)
    return CriticJudgement(False, "unparseable")


def check_result(
    problem: CodeProblem,
    execution_output: str,
    backend: Backend,
    prompt_dir=None,
) -> CriticJudgement:
    """LLM-as-critic judgment of an execution transcript."""
    prompt = render_prompt("result_check", prompt_dir, statement=problem.statement, output=execution_output)
    reply = backend.complete(CompletionRequest(messages=(user_message(prompt),), temperature=0.0)).samples[0]
    return parse_critic_reply(reply)


def verify(
    problem: CodeProblem,
    code: str,
    limits: SandboxLimits | None = None,
    backend: Backend | None = None,
    shim_cmd: Sequence[str] | None = None,
    prompt_dir=None,
    gen_retries: int = 2,
) -> Verdict:
    """Full verification dispatch.

    Executable tests -> direct execution. No tests -> generate tests, run
    them alongside the candidate, judge the output with the critic backend.
    The verdict records which path was taken.
    """
    limits = limits or SandboxLimits()
    limits.validate()
    if problem.test_cases:
        return run_candidate(code, problem.test_cases, limits, shim_cmd)
    if backend is None:
        raise ValidationError("verify_needs_backend", "problem has no tests and no critic backend given")
    try:
        bundle = generate_tests(
            problem, code, backend, limits, shim_cmd, prompt_dir, max_retries=gen_retries
        )
    except TestGenerationError as exc:
        return Verdict(status="crashed", verification_path=PATH_GENERATED, cause=str(exc))
    outcome = run_shim_job(
        {"mode": "run_test_code", "code": code, "test_code": bundle.test_code},
        limits,
        shim_cmd,
    )
    if outcome.timed_out:
        return Verdict(
            status="timeout",
            tests_run=1,
            failures=(TestFailure(0, "", "", "wall-time limit exceeded"),),
            duration_s=limits.wall_time_s,
            verification_path=PATH_GENERATED,
        )
    if outcome.verdict is None:
        return Verdict(status="crashed", verification_path=PATH_GENERATED, cause=outcome.stderr_tail[:400])
    shim_verdict = outcome.verdict
    duration = float(shim_verdict.get("elapsed_s", 0.0))
    if not shim_verdict.get("ok"):
        return Verdict(
            status="failed",
            tests_run=1,
            failures=(
                TestFailure(0, "", shim_verdict.get("stdout", "")[:1000], shim_verdict.get("stderr_excerpt", "")),
            ),
            duration_s=duration,
            verification_path=PATH_GENERATED,
            cause=shim_verdict.get("exception_type"),
        )
    judgement = check_result(problem, shim_verdict.get("stdout", ""), backend, prompt_dir)
    if judgement.correct:
        return Verdict(
            status="passed",
            tests_run=1,
            tests_passed=1,
            duration_s=duration,
            verification_path=PATH_GENERATED,
        )
    return Verdict(
        status="failed",
        tests_run=1,
        failures=(TestFailure(0, "", shim_verdict.get("stdout", "")[:1000], judgement.rationale),),
        duration_s=duration,
        verification_path=PATH_GENERATED,
        cause=judgement.rationale,
    )


class SandboxExecutor:
    """Shareable executor handle bundling limits, shim command, and critic backend."""

    def __init__(
        self,
        limits: SandboxLimits | None = None,
        shim_cmd: Sequence[str] | None = None,
        backend: Backend | None = None,
        prompt_dir=None,
        gen_retries: int = 2,
    ):
        self.limits = limits or SandboxLimits()
        self.limits.validate()
        self.shim_cmd = tuple(shim_cmd) if shim_cmd else None
        self.backend = backend
        self.prompt_dir = prompt_dir
        self.gen_retries = gen_retries

    def run_candidate(self, code: str, tests: Sequence[TestCase]) -> Verdict:
        return run_candidate(code, tests, self.limits, self.shim_cmd)

    def verify(self, problem: CodeProblem, code: str) -> Verdict:
        return verify(
            problem,
            code,
            self.limits,
            self.backend,
            self.shim_cmd,
            self.prompt_dir,
            self.gen_retries,
        )
