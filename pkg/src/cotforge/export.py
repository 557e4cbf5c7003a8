"""Emit training-ready datasets: SFT records from traces, step-DPO records
from preference pairs, each with a manifest carrying the frozen training
constants for downstream trainers plus checksums of the emitted files."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import ValidationError
from .model import CotTrace, dump_jsonl_line, parse_cot, serialize_cot
from .tree import PreferencePair

logger = logging.getLogger(__name__)

# Frozen training constants for the manifest; external trainers reproduce
# the reference settings from these without any other documentation.
TRAINING_CONSTANTS = {
    "sft": {
        "epochs": 3,
        "learning_rate": 5e-6,
        "global_batch_size": 256,
        "weight_decay": 0.1,
        "warmup_steps": 30,
        "optimizer": "adamw",
        "adam_beta1": 0.9,
        "adam_beta2": 0.95,
        "lr_scheduler": "cosine",
    },
    "step_dpo": {
        "epochs": 3,
        "learning_rate": 5e-6,
        "global_batch_size": 256,
        "beta": 0.1,
        "nll_coefficient": 0.2,
        "warmup_ratio": 0.2,
        "optimizer": "adamw",
        "lr_scheduler": "cosine",
    },
}


@dataclass(frozen=True)
class SftRecord:
    instruction: str
    response: str

    def validate(self) -> None:
        # the response must reparse to a valid trace
        parse_cot(self.response)


@dataclass(frozen=True)
class StepDpoRecord:
    instruction: str
    chosen: str
    rejected: str
    scores: dict[str, float]

    def validate(self) -> None:
        if self.chosen == self.rejected:
            raise ValidationError("dpo_chosen_distinct")
        if not self.scores["chosen"] > self.scores["rejected"]:
            raise ValidationError("dpo_score_order")


@dataclass
class ExportManifest:
    dataset: str
    records: int
    excluded: int
    checksums: dict[str, str]
    training_constants: dict = field(default_factory=lambda: TRAINING_CONSTANTS)
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "records": self.records,
            "excluded": self.excluded,
            "checksums": self.checksums,
            "training_constants": self.training_constants,
            "config_echo": self.config_echo,
        }


@dataclass
class ExportResult:
    path: Path
    manifest: ExportManifest
    excluded: list[dict] = field(default_factory=list)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_with_manifest(
    path: Path, lines: list[str], dataset: str, excluded: list[dict], config_echo: dict
) -> ExportResult:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(lines), encoding="utf-8")
    manifest = ExportManifest(
        dataset=dataset,
        records=len(lines),
        excluded=len(excluded),
        checksums={path.name: _sha256(path)},
        config_echo=config_echo,
    )
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return ExportResult(path=path, manifest=manifest, excluded=excluded)


def export_sft(
    traces: Iterable[CotTrace],
    out_path: str | Path,
    instructions: dict[str, str],
    reverify: Callable[[CotTrace], bool] | None = None,
    config_echo: dict | None = None,
) -> ExportResult:
    """One JSONL line per verdict-passed trace.

    ``instructions`` maps problem_id to the instruction text. When a
    ``reverify`` callable is given, traces whose final code no longer passes
    are excluded and logged rather than exported.
    """
    lines: list[str] = []
    excluded: list[dict] = []
    for trace in traces:
        if trace.verdict is None or not trace.verdict.passed:
            excluded.append({"problem_id": trace.problem_id, "reason": "verdict_not_passed"})
            logger.warning("excluding %s: verdict not passed", trace.problem_id)
            continue
        if reverify is not None and not reverify(trace):
            excluded.append({"problem_id": trace.problem_id, "reason": "reverification_failed"})
            logger.warning("excluding %s: re-verification failed", trace.problem_id)
            continue
        instruction = instructions.get(trace.problem_id)
        if instruction is None:
            excluded.append({"problem_id": trace.problem_id, "reason": "unknown_problem"})
            logger.warning("excluding %s: no instruction text", trace.problem_id)
            continue
        record = SftRecord(instruction=instruction, response=serialize_cot(trace))
        record.validate()
        lines.append(dump_jsonl_line({"instruction": record.instruction, "response": record.response}))
    return _write_with_manifest(Path(out_path), lines, "sft", excluded, config_echo or {})


def export_step_dpo(
    pairs: Iterable[PreferencePair],
    out_path: str | Path,
    config_echo: dict | None = None,
) -> ExportResult:
    """One JSONL line per pair; the instruction is the pair prefix byte-exactly.

    Pairs violating the score-order invariant are rejected at export with an
    error entry rather than silently written.
    """
    lines: list[str] = []
    excluded: list[dict] = []
    for pair in pairs:
        try:
            record = StepDpoRecord(
                instruction=pair.prefix,
                chosen=pair.chosen_step,
                rejected=pair.rejected_step,
                scores={"chosen": pair.chosen_score, "rejected": pair.rejected_score},
            )
            record.validate()
        except (ValidationError, KeyError) as exc:
            excluded.append({"problem_id": pair.problem_id, "reason": str(exc)})
            logger.error("rejecting invalid pair for %s: %s", pair.problem_id, exc)
            continue
        lines.append(
            dump_jsonl_line(
                {
                    "instruction": record.instruction,
                    "chosen": record.chosen,
                    "rejected": record.rejected,
                    "scores": record.scores,
                }
            )
        )
    return _write_with_manifest(Path(out_path), lines, "step_dpo", excluded, config_echo or {})


def parse_sft_line(line: str) -> SftRecord:
    data = json.loads(line)
    record = SftRecord(instruction=data["instruction"], response=data["response"])
    record.validate()
    return record


def parse_step_dpo_line(line: str) -> StepDpoRecord:
    data = json.loads(line)
    record = StepDpoRecord(
        instruction=data["instruction"],
        chosen=data["chosen"],
        rejected=data["rejected"],
        scores={"chosen": data["scores"]["chosen"], "rejected": data["scores"]["rejected"]},
    )
    record.validate()
    return record
