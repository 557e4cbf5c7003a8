"""Editable prompt assets, loadable from the package or overridden by path."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template

_NAMES = (
    "problem_generation",
    "evolve_instruction",
    "difficulty_analysis",
    "thinking_system",
    "gate",
    "failure_reflection",
    "test_generation",
    "result_check",
    "policy_continuation",
    "solve",
)


def load_prompt(name: str, prompt_dir: str | Path | None = None) -> str:
    """Return the asset text, preferring ``prompt_dir`` overrides."""
    if name not in _NAMES:
        raise KeyError(f"unknown prompt asset {name!r}")
    if prompt_dir is not None:
        override = Path(prompt_dir) / f"{name}.txt"
        if override.exists():
            return override.read_text(encoding="utf-8")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(name: str, prompt_dir: str | Path | None = None, **values: str) -> str:
    """Substitute ``${placeholders}``; unknown placeholders are left intact."""
    return Template(load_prompt(name, prompt_dir)).safe_substitute(**values)
