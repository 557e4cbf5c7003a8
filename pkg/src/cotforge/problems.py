"""Stage 1: ingest, synthesize, evolve, filter, and decontaminate code problems."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

from .backend import Backend, CompletionRequest, user_message
from .errors import BackendError, ValidationError
from .model import CodeProblem, problem_from_dict
from .prompts import render_prompt
from .textnorm import NORMALIZATION_RULE, ngrams, normalize_tokens

logger = logging.getLogger(__name__)

DEFAULT_NGRAM_N = 10


@dataclass(frozen=True)
class SeedSnippet:
    file_name: str
    function_names: tuple[str, ...]
    code: str
    origin: str = ""

    def validate(self) -> None:
        if not self.code:
            raise ValidationError("snippet_code_nonempty")


@dataclass(frozen=True)
class FilterDecision:
    clear_intent: bool
    challenging: bool
    self_contained: bool
    rationale: str
    accepted: bool

    @staticmethod
    def from_flags(clear_intent: bool, challenging: bool, self_contained: bool, rationale: str) -> "FilterDecision":
        return FilterDecision(
            clear_intent=clear_intent,
            challenging=challenging,
            self_contained=self_contained,
            rationale=rationale,
            accepted=clear_intent and challenging and self_contained,
        )


@dataclass(frozen=True)
class SynthesisFailure:
    seed_file: str
    reason: str
    backend_id: str


class LineIssue(NamedTuple):
    line_no: int
    message: str


@dataclass
class IngestReport:
    errors: list[LineIssue] = field(default_factory=list)
    warnings: list[LineIssue] = field(default_factory=list)


class HoldoutDoc(NamedTuple):
    id: str
    text: str


@dataclass
class Removal:
    problem: CodeProblem
    witness_gram: str
    holdout_id: str


@dataclass
class NGramIndex:
    """Read-only n-gram lookup over holdout texts, built once per run."""

    n: int = DEFAULT_NGRAM_N
    normalization: str = NORMALIZATION_RULE
    grams: dict[tuple[str, ...], str] = field(default_factory=dict)

    @staticmethod
    def build(docs: list[HoldoutDoc], n: int = DEFAULT_NGRAM_N) -> "NGramIndex":
        if n < 1:
            raise ValidationError("ngram_n_positive")
        index = NGramIndex(n=n)
        for doc in docs:
            for gram in ngrams(normalize_tokens(doc.text), n):
                # first holdout claiming a gram wins; any witness is valid
                index.grams.setdefault(gram, doc.id)
        return index

    def lookup(self, text: str) -> tuple[str, str] | None:
        """First overlapping gram of ``text`` as (joined gram, holdout id)."""
        for gram in ngrams(normalize_tokens(text), self.n):
            hit = self.grams.get(gram)
            if hit is not None:
                return " ".join(gram), hit
        return None


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def ingest_problems(path: str | Path) -> tuple[list[CodeProblem], IngestReport]:
    """Load a problems JSONL file, keeping valid lines and reporting bad ones.

    Duplicate ids keep the first occurrence and warn. Records default to
    source=collected.
    """
    report = IngestReport()
    problems: list[CodeProblem] = []
    seen: set[str] = set()
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("record is not an object")
            problem = problem_from_dict(record)
        except (ValueError, KeyError, TypeError, ValidationError) as exc:
            detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            report.errors.append(LineIssue(line_no, detail))
            continue
        if problem.id in seen:
            report.warnings.append(LineIssue(line_no, f"duplicate id {problem.id!r}, first occurrence kept"))
            continue
        seen.add(problem.id)
        problems.append(problem)
    return problems, report


def load_snippets(path: str | Path) -> list[SeedSnippet]:
    snippets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        snippet = SeedSnippet(
            file_name=record["file_name"],
            function_names=tuple(record.get("function_names", [])),
            code=record["code"],
            origin=record.get("origin", ""),
        )
        snippet.validate()
        snippets.append(snippet)
    return snippets


def load_holdout(path: str | Path) -> list[HoldoutDoc]:
    docs = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        record = json.loads(line)
        docs.append(HoldoutDoc(id=str(record.get("id", f"holdout-{i}")), text=record["text"]))
    return docs


# ---------------------------------------------------------------------------
# Snippet dedup
# ---------------------------------------------------------------------------


def dedup_snippets(snippets: list[SeedSnippet]) -> list[SeedSnippet]:
    """Keep at most one snippet per file name and per function name.

    First occurrence wins on either key; output order is stable. Idempotent.
    """
    seen_files: set[str] = set()
    seen_functions: set[str] = set()
    kept: list[SeedSnippet] = []
    for snippet in snippets:
        if snippet.file_name in seen_files:
            continue
        if any(fn in seen_functions for fn in snippet.function_names):
            continue
        seen_files.add(snippet.file_name)
        seen_functions.update(snippet.function_names)
        kept.append(snippet)
    return kept


# ---------------------------------------------------------------------------
# Synthesis / evolution / filtering
# ---------------------------------------------------------------------------


def _ask(backend: Backend, prompt: str, temperature: float = 0.7) -> str:
    response = backend.complete(
        CompletionRequest(messages=(user_message(prompt),), temperature=temperature)
    )
    return response.samples[0]


def synthesize_problem(
    seed: SeedSnippet, backend: Backend, prompt_dir=None
) -> CodeProblem | SynthesisFailure:
    """Draft a new problem from a seed snippet; refusals become failure records."""
    seed.validate()
    prompt = render_prompt("problem_generation", prompt_dir, code=seed.code)
    try:
        statement = _ask(backend, prompt).strip()
    except BackendError as exc:
        return SynthesisFailure(seed.file_name, f"backend error: {exc}", backend.backend_id)
    if not statement:
        return SynthesisFailure(seed.file_name, "empty statement", backend.backend_id)
    digest = hashlib.sha1(f"{seed.origin}|{seed.file_name}|{statement}".encode("utf-8")).hexdigest()
    return CodeProblem(
        id=f"synth-{digest[:12]}",
        statement=statement,
        source="synthesized",
        provenance={
            "seed_file": seed.file_name,
            "seed_functions": list(seed.function_names),
            "seed_origin": seed.origin,
            "generator_backend": backend.backend_id,
        },
    )


def evolve_instruction(problem: CodeProblem, backend: Backend, prompt_dir=None) -> CodeProblem:
    """Rewrite the statement to be more challenging.

    The pre-evolution statement is preserved in provenance. An identical
    rewrite is accepted and flagged no_change; a backend failure passes the
    problem through unmodified with a warning.
    """
    prompt = render_prompt("evolve_instruction", prompt_dir, statement=problem.statement)
    try:
        evolved = _ask(backend, prompt).strip()
    except BackendError as exc:
        logger.warning("evolution failed for %s, keeping original: %s", problem.id, exc)
        return problem
    if not evolved:
        logger.warning("empty evolution for %s, keeping original", problem.id)
        return problem
    provenance = dict(problem.provenance)
    provenance["pre_evolution_statement"] = problem.statement
    provenance["evolution_backend"] = backend.backend_id
    if evolved == problem.statement:
        provenance["evolution_no_change"] = True
    return replace(problem, statement=evolved, provenance=provenance)


_COMPACT_JUDGE = r"^\s*(yes|no)\s*/\s*(yes|no)\s*/\s*(yes|no)\s*$"


def parse_filter_reply(reply: str) -> FilterDecision:
    """Parse the three yes/no judgments; unparseable output rejects."""
    compact = re.match(_COMPACT_JUDGE, reply.strip(), re.IGNORECASE)
    if compact:
        flags = [g.lower() == "yes" for g in compact.groups()]
        return FilterDecision.from_flags(*flags, rationale=reply.strip())
    labels = {}
    for name in ("clear_intent", "challenging", "self_contained"):
        m = re.search(rf"{name}\s*[:=]\s*(yes|no)", reply, re.IGNORECASE)
        if m is None:
            return FilterDecision(False, False, False, "unparseable", False)
        labels[name] = m.group(1).lower() == "yes"
    return FilterDecision.from_flags(
        labels["clear_intent"], labels["challenging"], labels["self_contained"], rationale=reply.strip()
    )


def filter_problem(problem: CodeProblem, backend: Backend, prompt_dir=None) -> FilterDecision:
    """One judge call deciding clear intent, challenge, and self-containment."""
    prompt = render_prompt("difficulty_analysis", prompt_dir, statement=problem.statement)
    reply = _ask(backend, prompt, temperature=0.0)
    return parse_filter_reply(reply)


# ---------------------------------------------------------------------------
# Decontamination
# ---------------------------------------------------------------------------


def ngram_overlap(a: str, b: str, n: int = DEFAULT_NGRAM_N) -> bool:
    """True iff some n-token window (post-normalization) occurs in both texts."""
    if n < 1:
        raise ValidationError("ngram_n_positive")
    grams_a = ngrams(normalize_tokens(a), n)
    if not grams_a:
        return False
    grams_b = set(ngrams(normalize_tokens(b), n))
    return any(g in grams_b for g in grams_a)


def decontaminate(
    problems: list[CodeProblem],
    holdout: list[HoldoutDoc],
    n: int = DEFAULT_NGRAM_N,
) -> tuple[list[CodeProblem], list[Removal]]:
    """Partition problems by n-gram overlap of their statements with holdout texts.

    Removed problems carry one witness gram and the matching holdout id.
    kept + removed preserves input order within each list.
    """
    if not holdout:
        raise ValidationError("holdout_nonempty")
    index = NGramIndex.build(holdout, n=n)
    kept: list[CodeProblem] = []
    removed: list[Removal] = []
    for problem in problems:
        hit = index.lookup(problem.statement)
        if hit is None:
            kept.append(problem)
        else:
            removed.append(Removal(problem=problem, witness_gram=hit[0], holdout_id=hit[1]))
    return kept, removed
