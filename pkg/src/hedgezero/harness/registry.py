"""Built-in experiments, one YAML file each under ``configs/``."""

from __future__ import annotations

from pathlib import Path

from .config import CONFIG_DIR, ConfigError, ExperimentConfig, load


def registry() -> list[str]:
    """Ids of the built-in experiments."""
    return sorted(p.stem for p in CONFIG_DIR.glob("*.yaml"))


def get(experiment_id: str) -> ExperimentConfig:
    if experiment_id not in registry():
        raise ConfigError("config.id", f"unknown experiment {experiment_id!r}")
    return load(CONFIG_DIR / f"{experiment_id}.yaml")


def resolve(ref: str) -> ExperimentConfig:
    """Registered id or path to a YAML file."""
    if ref in registry():
        return get(ref)
    if Path(ref).is_file():
        return load(ref)
    raise ConfigError("config", f"{ref!r} is neither a registered experiment nor a file")
