"""Exogenous price processes.

Every model is action-independent and Markov in the current price. Models
expose a small duck-typed interface used by the MDP, the DP oracle and the
search agents:

    initial_price(rng) -> float
    sample_next(k, price, rng) -> float
    transitions(k, price) -> list[(next_price, probability)]   (enumerable models)
    model_id : str
    informative : bool    (False when the price carries no task information)
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


class NotEnumerableError(TypeError):
    """Raised when a model has no finite transition kernel."""


def _price_key(price: float) -> int:
    return int(round(price * 1e9))


@dataclass(frozen=True, eq=False)
class TrinomialChain:
    """Finite Markov chain over ordered price levels."""

    states: np.ndarray
    transition: np.ndarray
    start_index: int = 0
    model_id: str = "trinomial"
    informative: bool = True
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != states.size:
            raise ContractError(f"transition must be square with side {states.size}, got {P.shape}")
        if np.any(P < 0):
            raise ContractError("transition has negative entries")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ContractError("transition rows must sum to 1")
        if not 0 <= self.start_index < states.size:
            raise ContractError("start_index out of range")
        states.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "_index", {_price_key(s): i for i, s in enumerate(states)})
        # Inverse-CDF tables for vectorised sampling.
        object.__setattr__(self, "_cdf", np.cumsum(P, axis=1))

    @property
    def n_states(self) -> int:
        return self.states.size

    def index_of(self, price: float) -> int:
        try:
            return self._index[_price_key(price)]
        except KeyError:
            raise ContractError(f"price {price} is not a state of the chain") from None

    def initial_price(self, rng=None) -> float:
        return float(self.states[self.start_index])

    def sample_next(self, k: int, price: float, rng: np.random.Generator) -> float:
        return float(self.states[trinomial_step(self, self.index_of(price), rng)])

    def transitions(self, k: int, price: float) -> list[tuple[float, float]]:
        row = self.transition[self.index_of(price)]
        return [(float(self.states[j]), float(row[j])) for j in np.flatnonzero(row > 0)]

    def sample_indices(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(idx.shape)
        cdf = self._cdf[idx]
        out = (u[..., None] >= cdf).sum(axis=-1)
        return np.minimum(out, self.n_states - 1)


def trinomial_step(chain: TrinomialChain, state_idx: int, rng: np.random.Generator) -> int:
    """Draw the successor index of ``state_idx``."""
    if not 0 <= state_idx < chain.n_states:
        raise ContractError(f"state index {state_idx} outside [0, {chain.n_states})")
    u = rng.random()
    j = int(np.searchsorted(chain._cdf[state_idx], u, side="right"))
    return min(j, chain.n_states - 1)


def nearest_neighbour_chain(
    states, p_up: float, p_down: float, start_index: int = 0, model_id: str = "trinomial"
) -> TrinomialChain:
    """Chain moving one level up/down; a blocked boundary move is merged into staying put."""
    states = np.asarray(states, dtype=float)
    m = states.size
    P = np.zeros((m, m))
    for i in range(m):
        P[i, i] = 1.0 - p_up - p_down
        if i + 1 < m:
            P[i, i + 1] = p_up
        else:
            P[i, i] += p_up
        if i > 0:
            P[i, i - 1] = p_down
        else:
            P[i, i] += p_down
    return TrinomialChain(states, P, start_index, model_id)


def nine_state_chain() -> TrinomialChain:
    """Prices 1..9, interior rows (0.2, 0.6, 0.2), boundary stay 0.8, started at 5."""
    return nearest_neighbour_chain(np.arange(1.0, 10.0), 0.2, 0.2, start_index=4, model_id="trinomial9")


def two_state_chain() -> TrinomialChain:
    """Prices {1, 2}; stay with probability 0.8."""
    P = np.array([[0.8, 0.2], [0.2, 0.8]])
    return TrinomialChain(np.array([1.0, 2.0]), P, start_index=0, model_id="twostate")


def additive_trinomial(
    p_up: float,
    p_down: float,
    tick: float = 0.05,
    start: float = 1.0,
    floor: float = 0.05,
    horizon: int = 20,
) -> TrinomialChain:
    """Additive trinomial lattice ``start + j*tick`` wide enough for ``horizon`` steps."""
    lo = max(floor, start - horizon * tick)
    n_down = int(round((start - lo) / tick))
    levels = np.round(start + tick * np.arange(-n_down, horizon + 1), 10)
    return nearest_neighbour_chain(
        levels, p_up, p_down, start_index=n_down, model_id=f"additive_trinomial(pu={p_up},pd={p_down},tick={tick})"
    )


@dataclass(frozen=True)
class GbmGrid:
    """Per-step lognormal price moves rounded to a tick."""

    mu: float
    sigma: float
    tick: float = 0.01
    price_floor: float = 0.01
    start: float = 5.0
    n_nodes: int = 21
    model_id: str = "gbm"
    informative: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("sigma must be non-negative")
        if self.tick <= 0:
            raise ContractError("tick must be positive")

    def _round(self, price):
        steps = np.round(np.asarray(price) / self.tick)
        return np.maximum(np.round(steps * self.tick, 10), self.price_floor)

    def check_price(self, price: float) -> None:
        if price <= 0:
            raise ContractError(f"price must be positive, got {price}")
        steps = price / self.tick
        if abs(steps - round(steps)) > 1e-6:
            raise ContractError(f"price {price} is not a multiple of tick {self.tick}")

    def initial_price(self, rng=None) -> float:
        return float(self.start)

    def sample_next(self, k: int, price: float, rng: np.random.Generator) -> float:
        return gbm_step(self, price, rng)

    def transitions(self, k: int, price: float) -> list[tuple[float, float]]:
        self.check_price(price)
        m = self.n_nodes
        z = norm.ppf((np.arange(m) + 0.5) / m)
        nxt = self._round(price * np.exp((self.mu - 0.5 * self.sigma**2) + self.sigma * z))
        merged: dict[float, float] = {}
        for p in nxt:
            merged[float(p)] = merged.get(float(p), 0.0) + 1.0 / m
        return sorted(merged.items())


def gbm_step(grid: GbmGrid, price: float, rng: np.random.Generator) -> float:
    """One lognormal step, rounded to the nearest tick and clamped at the floor."""
    grid.check_price(price)
    z = rng.standard_normal()
    return float(grid._round(price * np.exp((grid.mu - 0.5 * grid.sigma**2) + grid.sigma * z)))


@dataclass(frozen=True)
class SignProcess:
    """I.i.d. fair draws from {-0.5, +0.5}; the starting value is random too."""

    values: tuple = (-0.5, 0.5)
    model_id: str = "sign"
    informative: bool = True

    def initial_price(self, rng: np.random.Generator) -> float:
        return float(self.values[int(rng.integers(2))])

    def sample_next(self, k: int, price: float, rng: np.random.Generator) -> float:
        return float(self.values[int(rng.integers(2))])

    def transitions(self, k: int, price: float) -> list[tuple[float, float]]:
        return [(float(v), 0.5) for v in self.values]


@dataclass(frozen=True)
class DummyMarket:
    """Standard-normal filler for tasks whose reward ignores the market."""

    model_id: str = "dummy"
    informative: bool = False

    def initial_price(self, rng: np.random.Generator) -> float:
        return float(rng.standard_normal())

    def sample_next(self, k: int, price: float, rng: np.random.Generator) -> float:
        return float(rng.standard_normal())

    def transitions(self, k: int, price: float):
        raise NotEnumerableError("the dummy market has no finite kernel")


def enumerate_transitions(model, price: float, k: int = 0) -> list[tuple[float, float]]:
    """Finite successor distribution of ``price`` under ``model``."""
    return model.transitions(k, price)


@dataclass(frozen=True, eq=False)
class PathReservoir:
    """Fixed set of price paths, each of length horizon + 1."""

    paths: np.ndarray
    seed: int
    model_id: str

    def __post_init__(self):
        paths = np.array(self.paths, dtype=float, copy=True)
        if paths.ndim != 2 or paths.shape[1] < 2:
            raise ContractError("paths must be a 2-d array with at least two columns")
        paths.setflags(write=False)
        object.__setattr__(self, "paths", paths)

    @property
    def horizon(self) -> int:
        return self.paths.shape[1] - 1

    def __len__(self) -> int:
        return self.paths.shape[0]

    def subset(self, idx) -> PathReservoir:
        return PathReservoir(self.paths[np.asarray(idx)], self.seed, self.model_id)

    def split(self, n_train: int, n_eval: int, rng: np.random.Generator) -> tuple[PathReservoir, PathReservoir]:
        """Disjoint random train/eval subsets."""
        if n_train + n_eval > len(self):
            raise ContractError(f"cannot draw {n_train}+{n_eval} paths from {len(self)}")
        perm = rng.permutation(len(self))
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:n_train + n_eval]))

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.horizon},{len(self)},{self.seed},{self.model_id.replace(',', ';')}\n")
        for row in self.paths:
            buf.write(",".join(f"{x:.6f}" for x in row))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> PathReservoir:
        lines = text.strip().splitlines()
        horizon, n_paths, seed, model_id = lines[0].split(",", 3)
        paths = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        if paths.shape != (int(n_paths), int(horizon) + 1):
            raise ContractError(f"reservoir body has shape {paths.shape}, header says {(int(n_paths), int(horizon) + 1)}")
        return cls(paths, int(seed), model_id)

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> PathReservoir:
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_reservoir(model, n_paths: int, horizon: int, seed: int) -> PathReservoir:
    """Sample ``n_paths`` paths of ``horizon`` steps; deterministic in ``seed``."""
    from .rng import make_rng

    if n_paths < 1 or horizon < 1:
        raise ContractError("n_paths and horizon must be at least 1")
    rng = make_rng(seed)
    paths = np.empty((n_paths, horizon + 1))
    if isinstance(model, TrinomialChain):
        idx = np.full(n_paths, model.start_index)
        paths[:, 0] = model.states[idx]
        for k in range(horizon):
            idx = model.sample_indices(idx, rng)
            paths[:, k + 1] = model.states[idx]
    else:
        for i in range(n_paths):
            x = model.initial_price(rng)
            paths[i, 0] = x
            for k in range(horizon):
                x = model.sample_next(k, x, rng)
                paths[i, k + 1] = x
    return PathReservoir(paths, seed, model.model_id)
