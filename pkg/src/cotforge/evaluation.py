"""Pass@1 evaluation: N sampled solutions per problem at fixed temperature,
verified by direct test execution only (never by an LLM judge)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol, Sequence

from .backend import Backend, CompletionRequest, system_message, user_message
from .errors import BackendError, SandboxEnvironmentError, ValidationError
from .model import CodeProblem, TestCase, Verdict, extract_last_code_block
from .prompts import render_prompt

logger = logging.getLogger(__name__)

EXTRACTION_RULE = "last-code-block"
ESTIMATOR = "c_over_n"

DIFFICULTY_ORDER = ("easy", "medium", "hard")
UNTAGGED = "untagged"


class CandidateRunner(Protocol):
    def run_candidate(self, code: str, tests: Sequence[TestCase]) -> Verdict: ...


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 10
    temperature: float = 0.2
    max_tokens: int = 4096
    retry_budget: int = 2

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValidationError("eval_n_samples")


@dataclass(frozen=True)
class SampleOutcome:
    problem_id: str
    sample_index: int
    status: str  # verdict status, or no_code_block / infra_failure
    passed: bool


@dataclass(frozen=True)
class ProblemResult:
    problem_id: str
    difficulty: str | None
    n: int
    c: int
    pass_at_1: float
    infra_failures: int


@dataclass
class EvalReport:
    protocol: dict
    results: list[ProblemResult] = field(default_factory=list)
    samples: list[SampleOutcome] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    infra_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "results": [vars(r) for r in self.results],
            "samples": [vars(s) for s in self.samples],
            "aggregates": self.aggregates,
            "infra_failures": self.infra_failures,
        }


def pass_at_1(c: int, n: int) -> float:
    """The unbiased pass@1 estimator: passing samples over total samples."""
    if n < 1:
        raise ValidationError("pass_at_1_n_positive")
    if not 0 <= c <= n:
        raise ValidationError("pass_at_1_c_range", f"c={c}, n={n}")
    return c / n


def _mean(values: list[Fraction]) -> float:
    if not values:
        return 0.0
    return float(sum(values, Fraction(0)) / len(values))


def evaluate(
    problems: list[CodeProblem],
    backend: Backend,
    config: EvalConfig,
    executor: CandidateRunner,
    prompt_dir=None,
) -> EvalReport:
    """n_samples generations per problem, last code block extracted and run
    against the problem's tests; per-problem pass@1 plus difficulty means.

    Every problem must carry executable tests. Infrastructure failures mark
    a sample as failing only after the retry budget, and are counted
    separately. All per-sample verdicts are kept so aggregates are
    independently recomputable.
    """
    config.validate()
    untested = [p.id for p in problems if not p.test_cases]
    if untested:
        raise ValidationError("eval_tests_required", f"problems without tests: {untested}")

    report = EvalReport(
        protocol={
            "n_samples": config.n_samples,
            "temperature": config.temperature,
            "extraction": EXTRACTION_RULE,
            "estimator": ESTIMATOR,
            "backend_id": backend.backend_id,
        }
    )
    system = system_message(render_prompt("solve", prompt_dir))
    for problem in problems:
        samples = _generate(problem, backend, config, system)
        c = 0
        infra = 0
        for index, sample in enumerate(samples):
            if sample is None:
                infra += 1
                report.samples.append(SampleOutcome(problem.id, index, "infra_failure", False))
                continue
            block = extract_last_code_block(sample)
            if block is None:
                report.samples.append(SampleOutcome(problem.id, index, "no_code_block", False))
                continue
            outcome = _run_sample(problem, block.code, executor, config)
            if outcome is None:
                infra += 1
                report.samples.append(SampleOutcome(problem.id, index, "infra_failure", False))
                continue
            report.samples.append(SampleOutcome(problem.id, index, outcome.status, outcome.passed))
            if outcome.passed:
                c += 1
        report.results.append(
            ProblemResult(
                problem_id=problem.id,
                difficulty=problem.difficulty,
                n=config.n_samples,
                c=c,
                pass_at_1=pass_at_1(c, config.n_samples),
                infra_failures=infra,
            )
        )
        report.infra_failures += infra

    per_problem = {r.problem_id: Fraction(r.c, r.n) for r in report.results}
    report.aggregates["overall"] = _mean(list(per_problem.values()))
    by_difficulty: dict[str, list[Fraction]] = {}
    for r in report.results:
        tag = r.difficulty if r.difficulty in DIFFICULTY_ORDER else (r.difficulty or UNTAGGED)
        by_difficulty.setdefault(tag, []).append(per_problem[r.problem_id])
    report.aggregates["by_difficulty"] = {
        tag: _mean(vals) for tag, vals in sorted(by_difficulty.items(), key=_difficulty_key)
    }
    return report


def _difficulty_key(item: tuple[str, list]) -> tuple[int, str]:
    tag = item[0]
    if tag in DIFFICULTY_ORDER:
        return (DIFFICULTY_ORDER.index(tag), tag)
    return (len(DIFFICULTY_ORDER), tag)


def _generate(problem: CodeProblem, backend: Backend, config: EvalConfig, system) -> list[str | None]:
    request = CompletionRequest(
        messages=(system, user_message(problem.statement)),
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        n_samples=config.n_samples,
    )
    for attempt in range(config.retry_budget + 1):
        try:
            return list(backend.complete(request).samples)
        except BackendError as exc:
            logger.warning("generation for %s failed (attempt %d): %s", problem.id, attempt + 1, exc)
    return [None] * config.n_samples


def _run_sample(problem: CodeProblem, code: str, executor: CandidateRunner, config: EvalConfig) -> Verdict | None:
    for attempt in range(config.retry_budget + 1):
        try:
            return executor.run_candidate(code, problem.test_cases)
        except SandboxEnvironmentError as exc:
            logger.warning("sandbox failure for %s (attempt %d): %s", problem.id, attempt + 1, exc)
    return None


def render_table(report: EvalReport) -> str:
    """Aligned text table with the Overall / Easy / Medium / Hard column order."""
    by_difficulty = report.aggregates.get("by_difficulty", {})
    columns = ["Overall"] + [d.capitalize() for d in DIFFICULTY_ORDER if d in by_difficulty]
    columns += [t.capitalize() for t in by_difficulty if t not in DIFFICULTY_ORDER]
    values = [report.aggregates.get("overall", 0.0)]
    values += [by_difficulty[d] for d in DIFFICULTY_ORDER if d in by_difficulty]
    values += [by_difficulty[t] for t in by_difficulty if t not in DIFFICULTY_ORDER]
    header = (
        f"pass@1 (n={report.protocol['n_samples']}, "
        f"temperature={report.protocol['temperature']}, estimator={report.protocol['estimator']})"
    )
    widths = [max(len(c), 8) for c in columns]
    row_names = " | ".join(c.ljust(w) for c, w in zip(columns, widths))
    row_vals = " | ".join(f"{v * 100:.2f}".ljust(w) for v, w in zip(values, widths))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([header, row_names, rule, row_vals])
