"""Pipeline configuration, env interpolation, and resumable checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import yaml

from .backend import Backend, BackendPolicy, HttpBackend, MockBackend
from .errors import CheckpointMismatch, ConfigError
from .evaluation import EvalConfig
from .maker import WorkflowConfig
from .model import TokenBudget
from .sandbox import SandboxLimits
from .tree import SearchConfig

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value: Any, missing: list[str]) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                missing.append(name)
                return m.group(0)
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(v, missing) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v, missing) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class BackendSpec:
    id: str
    kind: str = "http"  # http | mock
    base_url: str = ""
    model: str = ""
    auth_env: str | None = None
    policy: BackendPolicy = field(default_factory=BackendPolicy)
    scripts: str | None = None  # JSONL fixture for mock backends


@dataclass
class PipelineConfig:
    backends: dict[str, BackendSpec]
    problems: dict[str, Any]
    cot: dict[str, Any]
    search: dict[str, Any]
    eval: dict[str, Any]
    sandbox: dict[str, Any]
    paths: dict[str, str]
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    def workflow_config(self) -> WorkflowConfig:
        cfg = WorkflowConfig(
            max_feedback_attempts=int(self.cot.get("max_feedback_attempts", 3)),
            provide_reference_after=int(self.cot.get("provide_reference_after", 2)),
            temperature=float(self.cot.get("temperature", 0.2)),
            max_tokens=int(self.cot.get("max_tokens", 4096)),
            max_gate_rounds=int(self.cot.get("max_gate_rounds", 8)),
        )
        cfg.validate()
        return cfg

    def search_config(self, seed: int | None = None) -> SearchConfig:
        cfg = SearchConfig(
            max_path_num=int(self.search.get("max_path_num", 5)),
            max_depth_num=int(self.search.get("max_depth_num", 64)),
            token_budget=TokenBudget(limit=int(self.search.get("token_limit", 25_000))),
            pair_accuracy_gap=float(self.search.get("pair_accuracy_gap", 0.4)),
            temperature=float(self.search.get("temperature", 0.2)),
            seed=seed if seed is not None else self.search.get("seed"),
            max_tokens=int(self.search.get("max_tokens", 8192)),
        )
        cfg.validate()
        return cfg

    def eval_config(self) -> EvalConfig:
        cfg = EvalConfig(
            n_samples=int(self.eval.get("n_samples", 10)),
            temperature=float(self.eval.get("temperature", 0.2)),
            max_tokens=int(self.eval.get("max_tokens", 4096)),
            retry_budget=int(self.eval.get("retry_budget", 2)),
        )
        cfg.validate()
        return cfg

    def sandbox_limits(self) -> SandboxLimits:
        limits = SandboxLimits(
            wall_time_s=float(self.sandbox.get("wall_time_s", 10.0)),
            cpu_time_s=float(self.sandbox.get("cpu_time_s", 10.0)),
            memory_bytes=int(self.sandbox.get("memory_mb", 512)) * 1024 * 1024,
            max_output_bytes=int(self.sandbox.get("max_output_kb", 1024)) * 1024,
        )
        limits.validate()
        return limits

    def shim_cmd(self) -> tuple[str, ...] | None:
        cmd = self.sandbox.get("shim_cmd")
        return tuple(cmd) if cmd else None

    def prompt_dir(self) -> str | None:
        return self.paths.get("prompt_dir") or None

    def build_backend(self, backend_id: str) -> Backend:
        spec = self.backends.get(backend_id)
        if spec is None:
            raise ConfigError([f"unknown backend id {backend_id!r}"])
        if spec.kind == "mock":
            backend = MockBackend(backend_id=spec.id)
            if spec.scripts:
                backend.load_scripts_jsonl(spec.scripts)
            return backend
        api_key = os.environ.get(spec.auth_env, "") if spec.auth_env else None
        return HttpBackend(
            backend_id=spec.id,
            base_url=spec.base_url,
            model=spec.model,
            policy=spec.policy,
            api_key=api_key or None,
        )


_KNOWN_STAGE_BACKEND_KEYS = {
    "problems": ("generator_backend", "judge_backend"),
    "cot": ("thinking_backend", "reflection_backend"),
    "search": ("policy_backend",),
    "eval": ("backend",),
    "sandbox": ("critic_backend",),
}


def load_config(path: str | Path) -> PipelineConfig:
    """Load and validate the YAML config; report every violation at once."""
    problems: list[str] = []
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([f"cannot load config {path}: {exc}"]) from exc
    missing_env: list[str] = []
    data = _interpolate(data, missing_env)
    for name in missing_env:
        problems.append(f"environment variable {name} is not set")

    backends: dict[str, BackendSpec] = {}
    for backend_id, spec in (data.get("backends") or {}).items():
        spec = spec or {}
        policy_data = spec.get("policy") or {}
        policy = BackendPolicy(
            max_concurrency=int(policy_data.get("max_concurrency", 4)),
            retry_limit=int(policy_data.get("retry_limit", 3)),
            retry_backoff=tuple(policy_data.get("retry_backoff", (0.5, 1.0, 2.0))),
            request_timeout=float(policy_data.get("request_timeout", 60.0)),
        )
        kind = spec.get("kind", "http")
        if kind not in ("http", "mock"):
            problems.append(f"backend {backend_id!r}: unknown kind {kind!r}")
        if kind == "http" and not spec.get("base_url"):
            problems.append(f"backend {backend_id!r}: base_url is required for http backends")
        scripts = spec.get("scripts")
        if scripts and not Path(scripts).exists():
            problems.append(f"backend {backend_id!r}: scripts file {scripts} not found")
        backends[backend_id] = BackendSpec(
            id=backend_id,
            kind=kind,
            base_url=spec.get("base_url", ""),
            model=spec.get("model", ""),
            auth_env=spec.get("auth_env"),
            policy=policy,
            scripts=scripts,
        )

    stages = {name: dict(data.get(name) or {}) for name in ("problems", "cot", "search", "eval", "sandbox")}
    for stage, keys in _KNOWN_STAGE_BACKEND_KEYS.items():
        for key in keys:
            ref = stages.get(stage, {}).get(key)
            if ref is not None and ref not in backends:
                problems.append(f"{stage}.{key} references unknown backend id {ref!r}")

    paths = {k: str(v) for k, v in (data.get("paths") or {}).items()}
    prompt_dir = paths.get("prompt_dir")
    if prompt_dir and not Path(prompt_dir).is_dir():
        problems.append(f"paths.prompt_dir {prompt_dir} is not a directory")

    if problems:
        raise ConfigError(problems)
    return PipelineConfig(
        backends=backends,
        problems=stages["problems"],
        cot=stages["cot"],
        search=stages["search"],
        eval=stages["eval"],
        sandbox=stages["sandbox"],
        paths=paths,
        raw=data,
    )


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.raw, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class RunCheckpoint:
    run_id: str
    stage: str
    config_hash: str
    completed: list[str] = field(default_factory=list)

    @staticmethod
    def load(path: str | Path) -> "RunCheckpoint":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return RunCheckpoint(
            run_id=data["run_id"],
            stage=data["stage"],
            config_hash=data["config_hash"],
            completed=list(data.get("completed", [])),
        )

    def save(self, path: str | Path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(
            {
                "run_id": self.run_id,
                "stage": self.stage,
                "config_hash": self.config_hash,
                "completed": self.completed,
            },
            ensure_ascii=False,
        )
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def run_with_checkpoint(
    items: Iterable,
    key_fn: Callable[[Any], str],
    worker: Callable[[Any], Any],
    checkpoint_path: str | Path,
    stage: str,
    cfg_hash: str,
    resume: bool = False,
    force: bool = False,
) -> tuple[list, int]:
    """Run worker per item, checkpointing after each; resume skips done ids.

    Resuming against a different config hash is refused unless forced. A
    completed run re-invoked with resume performs zero item work. Returns
    (results for items actually worked, count skipped).
    """
    checkpoint_path = Path(checkpoint_path)
    if resume and checkpoint_path.exists():
        checkpoint = RunCheckpoint.load(checkpoint_path)
        if checkpoint.stage != stage:
            raise CheckpointMismatch(
                f"checkpoint is for stage {checkpoint.stage!r}, not {stage!r}"
            )
        if checkpoint.config_hash != cfg_hash and not force:
            raise CheckpointMismatch(
                f"config hash {cfg_hash} differs from checkpoint {checkpoint.config_hash}; "
                "rerun with --force to override"
            )
    else:
        checkpoint = RunCheckpoint(run_id=os.urandom(4).hex(), stage=stage, config_hash=cfg_hash)
    done = set(checkpoint.completed)
    results = []
    skipped = 0
    for item in items:
        key = key_fn(item)
        if key in done:
            skipped += 1
            continue
        results.append(worker(item))
        checkpoint.completed.append(key)
        done.add(key)
        checkpoint.save(checkpoint_path)
    return results, skipped
