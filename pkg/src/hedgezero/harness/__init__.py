"""Experiment configs, runner, statistics and plots."""

from .config import ConfigError, ExperimentConfig, load
from .registry import get, registry, resolve
from .runner import RunResult, run, run_dp
from .stats import RunStats, aggregate

__all__ = ["ConfigError", "ExperimentConfig", "RunResult", "RunStats", "aggregate", "get", "load", "registry",
           "resolve", "run", "run_dp"]
