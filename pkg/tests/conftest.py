from __future__ import annotations

import random

import pytest

from cotforge.errors import TestGenerationError
from cotforge.model import CodeProblem, CotTrace, Segment, TestCase, TestFailure, Verdict

# domain classes, not test classes; keep pytest from trying to collect them
TestCase.__test__ = False
TestFailure.__test__ = False
TestGenerationError.__test__ = False

# Vocabulary for random traces: words, punctuation, digits, no reserved
# markers and no backticks (those are format-control characters).
WORDS = (
    "alpha", "beta", "gamma", "delta", "loop", "bound", "check", "invariant",
    "x=1", "n-1", "sort", "merge", "0", "42", "queue;", "stack,", "dp[i]",
    "O(n)", "edge.", "case!", "if", "else:", "while", "return",
)

CODE_LINES = (
    "print(1)",
    "x = int(input())",
    "print(x * 2)",
    "def solve(n):",
    "    return n + 1",
    "for i in range(10):",
    "    pass",
    "values = [1, 2, 3]",
)


def random_step(rng: random.Random) -> str:
    words = [rng.choice(WORDS) for _ in range(rng.randint(1, 6))]
    step = " ".join(words)
    if rng.random() < 0.2:
        cut = rng.randrange(len(step))
        step = step[:cut] + "\n" + step[cut:]
    return step


def random_trace(rng: random.Random, problem_id: str = "prob") -> CotTrace:
    """A structurally valid trace: segments alternate kinds, reflections are
    single-step, thinking segments carry 1-4 steps."""
    n_segments = rng.randint(1, 6)
    kind = "thinking" if rng.random() < 0.9 else "reflection"
    segments = []
    for _ in range(n_segments):
        if kind == "thinking":
            steps = tuple(random_step(rng) for _ in range(rng.randint(1, 4)))
            segments.append(Segment("thinking", steps))
            kind = "reflection"
        else:
            segments.append(Segment.reflection(random_step(rng)))
            kind = "thinking"
    code = "\n".join(rng.choice(CODE_LINES) for _ in range(rng.randint(1, 5)))
    return CotTrace(problem_id=problem_id, segments=tuple(segments), final_code=code)


def make_problem(
    pid: str = "p1",
    statement: str = "Read an integer n and print n doubled.",
    tests: tuple[TestCase, ...] = (TestCase(kind="stdin_stdout", input="21", expected_output="42"),),
    difficulty: str | None = None,
    reference_solutions: tuple[str, ...] = (),
) -> CodeProblem:
    return CodeProblem(
        id=pid,
        statement=statement,
        source="collected",
        difficulty=difficulty,
        test_cases=tests,
        reference_solutions=reference_solutions,
    )


class ScriptedExecutor:
    """Executor double: the verdict is decided by the candidate code text.

    Code containing "OK" passes; anything else fails. Calls are counted and
    recorded so tests can assert the execution budget.
    """

    def __init__(self, pass_marker: str = "OK"):
        self.pass_marker = pass_marker
        self.calls: list[tuple[str, str]] = []

    def _verdict(self, code: str) -> Verdict:
        if self.pass_marker in code:
            return Verdict(status="passed", tests_run=1, tests_passed=1)
        return Verdict(status="failed", tests_run=1, tests_passed=0)

    def verify(self, problem: CodeProblem, code: str) -> Verdict:
        self.calls.append((problem.id, code))
        return self._verdict(code)

    def run_candidate(self, code: str, tests) -> Verdict:
        self.calls.append(("<direct>", code))
        return self._verdict(code)


class QueuedExecutor:
    """Executor double replaying a fixed verdict sequence."""

    def __init__(self, verdicts: list[Verdict]):
        self.queue = list(verdicts)
        self.calls = 0

    def _next(self) -> Verdict:
        self.calls += 1
        if not self.queue:
            raise AssertionError("executor verdict queue exhausted")
        return self.queue.pop(0)

    def verify(self, problem, code) -> Verdict:
        return self._next()

    def run_candidate(self, code, tests) -> Verdict:
        return self._next()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240901)
