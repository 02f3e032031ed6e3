"""Experiment configuration: YAML files validated into library objects.

Top-level fields:

    id, description
    market:   kind (dummy | sign | nine_state | two_state | chain | additive_trinomial | gbm) + parameters
    mdp:      horizon, task, grid, cost, utility, payoff, p0, init_cash, init_holdings,
              cash_min, cash_max, reward_scale, targets, decoy_gap
    agents:   any of dh, alphazero, muzero, dp_oracle
    analysis: q_slice / heatmap states for the DP oracle; reservoir_paths / sizes for muzero
    scale, n_cycles, n_eval_paths, seed, output_dir

Grids are either explicit lists or ``{start, step, count}``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from ..deephedge import DhConfig
from ..market import (DummyMarket, GbmGrid, SignProcess, TrinomialChain, additive_trinomial, nine_state_chain,
                      two_state_chain)
from ..mcts import AlphaZeroConfig
from ..muzero import DynamicsConfig, MuZeroConfig
from ..replication import ConstraintSpec, CostSpec, MdpState, PayoffSpec, ReplicationMdp, UtilitySpec

CONFIG_DIR = Path(__file__).with_name("configs")
AGENTS = ("dh", "alphazero", "muzero", "dp_oracle")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    id: str
    market: dict
    mdp: dict
    agents: dict
    analysis: dict = field(default_factory=dict)
    description: str = ""
    scale: float = 1.0
    n_cycles: int = 100
    n_eval_paths: int = 1000
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def config_hash(self) -> str:
        """Stable digest of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("description")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, scale=None, cycles=None, seed=None, out=None) -> ExperimentConfig:
        c = ExperimentConfig(**self.to_dict())
        if scale is not None:
            c.scale = float(scale)
        if cycles is not None:
            c.n_cycles = int(cycles)
        if seed is not None:
            c.seed = int(seed)
        if out is not None:
            c.output_dir = str(out)
        return c


# -- parsing -------------------------------------------------------------------
def _require(block: dict, key: str, path: str):
    if key not in block:
        raise ConfigError(f"{path}.{key}", "missing required field")
    return block[key]


def _mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _only(block: dict, allowed, path: str) -> None:
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", "unknown field")


def parse_grid(spec, path: str) -> np.ndarray:
    if isinstance(spec, dict):
        _only(spec, ("start", "step", "count"), path)
        count = int(_require(spec, "count", path))
        if count < 1:
            raise ConfigError(f"{path}.count", "must be positive")
        return np.round(float(_require(spec, "start", path)) + float(_require(spec, "step", path)) * np.arange(count), 10)
    if isinstance(spec, (list, tuple)):
        return np.asarray(spec, dtype=float)
    raise ConfigError(path, "grid must be a list or {start, step, count}")


def from_dict(d: dict) -> ExperimentConfig:
    d = _mapping(d, "config")
    names = {f.name for f in fields(ExperimentConfig)}
    _only(d, names, "config")
    for key in ("id", "market", "mdp", "agents"):
        _require(d, key, "config")
    cfg = ExperimentConfig(**{k: v for k, v in d.items()})
    cfg.market = _mapping(cfg.market, "market")
    cfg.mdp = _mapping(cfg.mdp, "mdp")
    cfg.agents = _mapping(cfg.agents, "agents")
    cfg.analysis = _mapping(cfg.analysis, "analysis")
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML ({exc})") from None
    except OSError as exc:
        raise ConfigError(str(path), str(exc)) from None
    return from_dict(data)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- builders --------------------------------------------------------------------
def build_market(block: dict):
    path = "market"
    kind = _require(block, "kind", path)
    params = {k: v for k, v in block.items() if k != "kind"}
    try:
        if kind == "dummy":
            return DummyMarket()
        if kind == "sign":
            return SignProcess()
        if kind == "nine_state":
            return nine_state_chain()
        if kind == "two_state":
            return two_state_chain()
        if kind == "chain":
            return TrinomialChain(np.asarray(params["states"], float), np.asarray(params["transition"], float),
                                  int(params.get("start_index", 0)))
        if kind == "additive_trinomial":
            _only(params, ("p_up", "p_down", "tick", "start", "floor", "horizon"), path)
            return additive_trinomial(**params)
        if kind == "gbm":
            _only(params, ("mu", "sigma", "tick", "price_floor", "start", "n_nodes"), path)
            return GbmGrid(**params)
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}", "missing required field") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.kind", f"unknown market kind {kind!r}")


def build_mdp(block: dict, horizon_override: int | None = None) -> ReplicationMdp:
    path = "mdp"
    _only(block, ("horizon", "task", "targets", "grid", "cost", "utility", "payoff", "p0", "init_cash",
                  "init_holdings", "cash_min", "cash_max", "reward_scale", "decoy_gap"), path)
    grid = parse_grid(_require(block, "grid", path), f"{path}.grid")
    try:
        constraints = ConstraintSpec(tuple(grid), block.get("cash_min"), block.get("cash_max"))
    except ValueError as exc:
        raise ConfigError(f"{path}.grid", str(exc)) from None
    parts = {}
    for key, cls in (("cost", CostSpec), ("utility", UtilitySpec), ("payoff", PayoffSpec)):
        sub = _mapping(block.get(key), f"{path}.{key}")
        try:
            parts[key] = cls(**sub)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{key}", str(exc)) from None
    try:
        return ReplicationMdp(
            horizon=int(_require(block, "horizon", path)),
            constraints=constraints,
            p0=float(block.get("p0", 0.0)),
            init_cash=float(block.get("init_cash", 0.0)),
            init_holdings=float(block.get("init_holdings", 0.0)),
            task=block.get("task", "replication"),
            targets=tuple(float(t) for t in block.get("targets", ())),
            reward_scale=float(block.get("reward_scale", 1.0)),
            decoy_gap=float(block.get("decoy_gap", 0.125)),
            **parts,
        )
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _dataclass_from(cls, block: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    _only(block, allowed, path)
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def build_dh(block: dict) -> DhConfig:
    block = dict(block)
    if "inputs" in block:
        block["inputs"] = tuple(block["inputs"])
    return _dataclass_from(DhConfig, block, "agents.dh")


def build_alphazero(block: dict, path: str = "agents.alphazero") -> AlphaZeroConfig:
    return _dataclass_from(AlphaZeroConfig, block, path)


def build_muzero(block: dict) -> MuZeroConfig:
    path = "agents.muzero"
    _only(block, ("agent", "dynamics", "w1", "w2", "tick", "floor"), path)
    base = MuZeroConfig()
    agent = build_alphazero(_mapping(block.get("agent"), f"{path}.agent"), f"{path}.agent") if "agent" in block \
        else base.agent
    dyn = _dataclass_from(DynamicsConfig, _mapping(block.get("dynamics"), f"{path}.dynamics"), f"{path}.dynamics") \
        if "dynamics" in block else base.dynamics
    rest = {k: float(v) for k, v in block.items() if k in ("w1", "w2", "tick", "floor")}
    if rest.get("w2", 1.0) <= 0:
        raise ConfigError(f"{path}.w2", "must be positive")
    return MuZeroConfig(agent=agent, dynamics=dyn, **rest)


def analysis_state(mdp: ReplicationMdp, market, block: dict, path: str) -> MdpState:
    """Decision state named by an analysis block; unspecified fields come from the initial state."""
    _only(block, ("k", "cash", "holdings", "price"), path)
    root = mdp.initial_state(market.initial_price(np.random.default_rng(0)))
    k = int(block.get("k", 0))
    if not 0 <= k < mdp.horizon:
        raise ConfigError(f"{path}.k", f"must lie in [0, {mdp.horizon})")
    cash = float(block.get("cash", root.cash))
    hold = float(block.get("holdings", root.holdings))
    price = float(block.get("price", root.price))
    return MdpState(k, cash, hold, price, mdp.p0 + cash + hold * price)


def validate(cfg: ExperimentConfig) -> None:
    """Build every block once; raises :class:`ConfigError` with the failing path."""
    if not isinstance(cfg.id, str) or not cfg.id:
        raise ConfigError("config.id", "must be a non-empty string")
    try:
        scale = float(cfg.scale)
    except (TypeError, ValueError):
        raise ConfigError("config.scale", "must be a number") from None
    if not 0 < scale <= 1:
        raise ConfigError("config.scale", "must lie in (0, 1]")
    for key in ("n_cycles", "n_eval_paths"):
        if int(getattr(cfg, key)) < 1:
            raise ConfigError(f"config.{key}", "must be at least 1")
    market = build_market(cfg.market)
    mdp = build_mdp(cfg.mdp)
    if not cfg.agents:
        raise ConfigError("agents", "at least one agent block is required")
    for name, block in cfg.agents.items():
        if name not in AGENTS:
            raise ConfigError(f"agents.{name}", "unknown agent")
        block = _mapping(block, f"agents.{name}")
        if name == "dh":
            build_dh(block)
        elif name == "alphazero":
            build_alphazero(block)
        elif name == "muzero":
            build_muzero(block)
    _only(cfg.analysis, ("q_slice", "heatmap", "reservoir_paths", "sizes"), "analysis")
    if "q_slice" in cfg.analysis:
        analysis_state(mdp, market, _mapping(cfg.analysis["q_slice"], "analysis.q_slice"), "analysis.q_slice")
    if "heatmap" in cfg.analysis:
        hm = dict(_mapping(cfg.analysis["heatmap"], "analysis.heatmap"))
        parse_grid(_require(hm, "cash", "analysis.heatmap"), "analysis.heatmap.cash")
        hm.pop("cash")
        analysis_state(mdp, market, hm, "analysis.heatmap")
    if "muzero" in cfg.agents and "sizes" not in cfg.analysis:
        raise ConfigError("analysis.sizes", "muzero experiments need reservoir sizes")
