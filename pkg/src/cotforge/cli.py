"""Operator entry point: one subcommand per pipeline stage.

Every stage reads and writes JSONL, takes its knobs from one YAML config
file, and the long-running stages checkpoint per item so a killed run can
resume without redoing completed work.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import evaluation, export, maker, problems as problems_mod, sandbox, tree as tree_mod
from .backend import Backend
from .config import PipelineConfig, config_hash, load_config, run_with_checkpoint
from .errors import CotforgeError
from .model import (
    CodeProblem,
    dump_jsonl_line,
    problem_from_dict,
    problem_to_dict,
    trace_from_dict,
    trace_to_dict,
    verdict_to_dict,
)

logger = logging.getLogger(__name__)


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def _setup_logging(log_format: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if log_format == "json":
        handler.setFormatter(JsonLogFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[handler], force=True)


class AppContext:
    def __init__(self, config: PipelineConfig | None, seed: int | None, resume: bool, force: bool):
        self.config = config
        self.seed = seed
        self.resume = resume
        self.force = force
        self._backends: dict[str, Backend] = {}

    def require_config(self) -> PipelineConfig:
        if self.config is None:
            raise click.UsageError("this command needs --config")
        return self.config

    def backend(self, backend_id: str) -> Backend:
        if backend_id not in self._backends:
            self._backends[backend_id] = self.require_config().build_backend(backend_id)
        return self._backends[backend_id]

    def stage_backend(self, stage: str, key: str, default: str | None = None) -> Backend:
        cfg = self.require_config()
        backend_id = getattr(cfg, stage).get(key, default)
        if backend_id is None:
            raise click.UsageError(f"config is missing {stage}.{key}")
        return self.backend(backend_id)

    def executor(self) -> sandbox.SandboxExecutor:
        cfg = self.require_config()
        critic_id = cfg.sandbox.get("critic_backend")
        critic = self.backend(critic_id) if critic_id else None
        return sandbox.SandboxExecutor(
            limits=cfg.sandbox_limits(),
            shim_cmd=cfg.shim_cmd(),
            backend=critic,
            prompt_dir=cfg.prompt_dir(),
        )

    def checkpoint_path(self, stage: str) -> Path:
        cfg = self.require_config()
        base = Path(cfg.paths.get("checkpoint_dir", ".cotforge-checkpoints"))
        return base / f"{stage}.json"

    def cfg_hash(self) -> str:
        return config_hash(self.require_config()) if self.config else "no-config"


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Seed forwarded to randomized stages.")
@click.option("--resume", is_flag=True, help="Skip items already in the stage checkpoint.")
@click.option("--force", is_flag=True, help="Resume even if the config hash changed.")
@click.option("--log-format", type=click.Choice(["text", "json"]), default="text")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, seed: int | None, resume: bool, force: bool, log_format: str) -> None:
    """Synthesize problems, reasoning traces, and step-wise preference data."""
    _setup_logging(log_format)
    config = load_config(config_path) if config_path else None
    ctx.obj = AppContext(config, seed, resume, force)


def _read_jsonl(path: str | Path) -> list[dict]:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def _write_jsonl(path: str | Path, records: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(dump_jsonl_line(r) for r in records), encoding="utf-8")


def _load_problems(path: str) -> list[CodeProblem]:
    loaded, report = problems_mod.ingest_problems(path)
    for issue in report.errors:
        logger.error("%s line %d: %s", path, issue.line_no, issue.message)
    for issue in report.warnings:
        logger.warning("%s line %d: %s", path, issue.line_no, issue.message)
    return loaded


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


@main.group()
def problems() -> None:
    """Stage 1: problem ingestion, synthesis, filtering, decontamination."""


@problems.command("ingest")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
def problems_ingest(input_path: str, out_path: str, report_path: str | None) -> None:
    loaded, report = problems_mod.ingest_problems(input_path)
    _write_jsonl(out_path, [problem_to_dict(p) for p in loaded])
    issues = [
        {"line": i.line_no, "severity": sev, "message": i.message}
        for sev, items in (("error", report.errors), ("warning", report.warnings))
        for i in items
    ]
    if report_path:
        _write_jsonl(report_path, issues)
    click.echo(f"ingested {len(loaded)} problems, {len(report.errors)} bad lines")


@problems.command("synth")
@click.option("--seeds", "seeds_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--failures", "failures_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def problems_synth(app: AppContext, seeds_path: str, out_path: str, failures_path: str | None) -> None:
    backend = app.stage_backend("problems", "generator_backend")
    prompt_dir = app.require_config().prompt_dir()
    seeds = problems_mod.dedup_snippets(problems_mod.load_snippets(seeds_path))
    drafts, failures = [], []
    for seed in seeds:
        result = problems_mod.synthesize_problem(seed, backend, prompt_dir)
        if isinstance(result, problems_mod.SynthesisFailure):
            failures.append({"seed_file": result.seed_file, "reason": result.reason})
        else:
            drafts.append(problem_to_dict(result))
    _write_jsonl(out_path, drafts)
    if failures_path:
        _write_jsonl(failures_path, failures)
    click.echo(f"synthesized {len(drafts)} drafts, {len(failures)} failures")


@problems.command("evolve")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def problems_evolve(app: AppContext, problems_path: str, out_path: str) -> None:
    backend = app.stage_backend("problems", "generator_backend")
    prompt_dir = app.require_config().prompt_dir()
    evolved = [
        problem_to_dict(problems_mod.evolve_instruction(p, backend, prompt_dir))
        for p in _load_problems(problems_path)
    ]
    _write_jsonl(out_path, evolved)
    click.echo(f"evolved {len(evolved)} problems")


@problems.command("filter")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-kept", required=True, type=click.Path(dir_okay=False))
@click.option("--out-rejected", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def problems_filter(app: AppContext, problems_path: str, out_kept: str, out_rejected: str | None) -> None:
    backend = app.stage_backend("problems", "judge_backend")
    prompt_dir = app.require_config().prompt_dir()
    kept, rejected = [], []
    for problem in _load_problems(problems_path):
        decision = problems_mod.filter_problem(problem, backend, prompt_dir)
        record = problem_to_dict(problem)
        if decision.accepted:
            kept.append(record)
        else:
            record["filter_decision"] = {
                "clear_intent": decision.clear_intent,
                "challenging": decision.challenging,
                "self_contained": decision.self_contained,
                "rationale": decision.rationale,
            }
            rejected.append(record)
    _write_jsonl(out_kept, kept)
    if out_rejected:
        _write_jsonl(out_rejected, rejected)
    click.echo(f"kept {len(kept)}, rejected {len(rejected)}")


@problems.command("decontaminate")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--holdout", "holdout_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-kept", required=True, type=click.Path(dir_okay=False))
@click.option("--out-removed", required=True, type=click.Path(dir_okay=False))
@click.option("--n", "ngram_n", type=int, default=problems_mod.DEFAULT_NGRAM_N, show_default=True)
def problems_decontaminate(problems_path: str, holdout_path: str, out_kept: str, out_removed: str, ngram_n: int) -> None:
    loaded = _load_problems(problems_path)
    holdout = problems_mod.load_holdout(holdout_path)
    kept, removed = problems_mod.decontaminate(loaded, holdout, n=ngram_n)
    _write_jsonl(out_kept, [problem_to_dict(p) for p in kept])
    _write_jsonl(
        out_removed,
        [
            {
                "problem": problem_to_dict(r.problem),
                "witness_gram": r.witness_gram,
                "holdout_id": r.holdout_id,
            }
            for r in removed
        ],
    )
    click.echo(f"kept {len(kept)}, removed {len(removed)}")


# ---------------------------------------------------------------------------
# cot
# ---------------------------------------------------------------------------


@main.group()
def cot() -> None:
    """Stage 2: multi-agent chain-of-thought trace generation."""


@cot.command("make")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--failures", "failures_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def cot_make(app: AppContext, problems_path: str, out_path: str, failures_path: str | None) -> None:
    cfg = app.require_config()
    workflow = cfg.workflow_config()
    thinking = app.stage_backend("cot", "thinking_backend")
    reflection = app.stage_backend("cot", "reflection_backend")
    executor = app.executor()
    prompt_dir = cfg.prompt_dir()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    failures_out = Path(failures_path) if failures_path else None

    def work(problem: CodeProblem) -> str:
        result = maker.make_trace(problem, workflow, thinking, reflection, executor, prompt_dir)
        if isinstance(result, maker.FailureRecord):
            record = {
                "problem_id": result.problem_id,
                "attempts": result.attempts,
                "reason": result.reason,
                "events": [e.to_dict() for e in result.transcript.events],
            }
            if failures_out:
                with failures_out.open("a", encoding="utf-8") as handle:
                    handle.write(dump_jsonl_line(record))
            return "failure"
        with out.open("a", encoding="utf-8") as handle:
            handle.write(dump_jsonl_line(trace_to_dict(result)))
        return "trace"

    results, skipped = run_with_checkpoint(
        _load_problems(problems_path),
        key_fn=lambda p: p.id,
        worker=work,
        checkpoint_path=app.checkpoint_path("cot-make"),
        stage="cot-make",
        cfg_hash=app.cfg_hash(),
        resume=app.resume,
        force=app.force,
    )
    click.echo(
        f"traces: {sum(1 for r in results if r == 'trace')}, "
        f"failures: {sum(1 for r in results if r == 'failure')}, skipped: {skipped}"
    )


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------


@main.group()
def tree() -> None:
    """Stage 3: tree search and preference-pair extraction."""


@tree.command("search")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def tree_search(app: AppContext, problems_path: str, out_dir: str) -> None:
    cfg = app.require_config()
    search_cfg = cfg.search_config(seed=app.seed)
    backend = app.stage_backend("search", "policy_backend")
    executor = app.executor()
    prompt_dir = cfg.prompt_dir()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(problem: CodeProblem) -> str:
        target = out / f"{problem.id}.tree.jsonl"
        result = tree_mod.search(
            problem,
            backend,
            executor,
            search_cfg,
            prompt_dir,
            persist_on_abort=target.with_suffix(".partial.jsonl"),
        )
        target.write_text(tree_mod.tree_to_jsonl(result), encoding="utf-8")
        return problem.id

    results, skipped = run_with_checkpoint(
        _load_problems(problems_path),
        key_fn=lambda p: p.id,
        worker=work,
        checkpoint_path=app.checkpoint_path("tree-search"),
        stage="tree-search",
        cfg_hash=app.cfg_hash(),
        resume=app.resume,
        force=app.force,
    )
    click.echo(f"searched {len(results)} problems, skipped {skipped}")


@tree.command("pairs")
@click.option("--trees", "trees_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def tree_pairs(app: AppContext, trees_dir: str, out_path: str) -> None:
    cfg = app.config
    search_cfg = cfg.search_config(seed=app.seed) if cfg else tree_mod.SearchConfig()
    records = []
    for path in sorted(Path(trees_dir).glob("*.tree.jsonl")):
        loaded = tree_mod.tree_from_jsonl(path.read_text(encoding="utf-8"))
        for pair in tree_mod.extract_pairs(loaded, search_cfg):
            records.append(tree_mod.pair_to_dict(pair))
    _write_jsonl(out_path, records)
    click.echo(f"extracted {len(records)} pairs")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


@main.group(name="export")
def export_group() -> None:
    """Emit SFT / step-DPO training files with manifests."""


@export_group.command("sft")
@click.option("--traces", "traces_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--no-reverify", is_flag=True, help="Skip re-running final code before export.")
@click.pass_obj
def export_sft_cmd(app: AppContext, traces_path: str, problems_path: str, out_path: str, no_reverify: bool) -> None:
    traces = [trace_from_dict(r) for r in _read_jsonl(traces_path)]
    problem_map = {p.id: p for p in _load_problems(problems_path)}
    instructions = {pid: p.statement for pid, p in problem_map.items()}
    reverify = None
    if not no_reverify:
        executor = app.executor()

        def reverify(trace):  # noqa: F811 - deliberate rebinding
            problem = problem_map.get(trace.problem_id)
            return problem is not None and executor.verify(problem, trace.final_code).passed

    result = export.export_sft(traces, out_path, instructions, reverify=reverify)
    click.echo(f"wrote {result.manifest.records} records, excluded {result.manifest.excluded}")


@export_group.command("dpo")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def export_dpo_cmd(pairs_path: str, out_path: str) -> None:
    pairs = [tree_mod.pair_from_dict(r) for r in _read_jsonl(pairs_path)]
    result = export.export_step_dpo(pairs, out_path)
    click.echo(f"wrote {result.manifest.records} records, excluded {result.manifest.excluded}")


# ---------------------------------------------------------------------------
# eval / verify
# ---------------------------------------------------------------------------


@main.group(name="eval")
def eval_group() -> None:
    """Pass@1 evaluation against executable tests."""


@eval_group.command("run")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--backend", "backend_id", required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def eval_run(app: AppContext, problems_path: str, backend_id: str, out_path: str | None) -> None:
    cfg = app.require_config()
    report = evaluation.evaluate(
        _load_problems(problems_path),
        app.backend(backend_id),
        cfg.eval_config(),
        app.executor(),
        cfg.prompt_dir(),
    )
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(
            json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    click.echo(evaluation.render_table(report))


@main.command("verify")
@click.option("--problem", "problem_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--code", "code_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def verify_cmd(app: AppContext, problem_path: str, code_path: str) -> None:
    """Verify one candidate file against one problem (JSON object or first JSONL line)."""
    raw = Path(problem_path).read_text(encoding="utf-8").strip().splitlines()[0]
    problem = problem_from_dict(json.loads(raw))
    code = Path(code_path).read_text(encoding="utf-8")
    executor = (
        app.executor()
        if app.config is not None
        else sandbox.SandboxExecutor()
    )
    verdict = executor.verify(problem, code)
    click.echo(json.dumps(verdict_to_dict(verdict), indent=2, ensure_ascii=False))
    sys.exit(0 if verdict.passed else 1)


def run() -> None:
    try:
        main(standalone_mode=True)
    except CotforgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run()
