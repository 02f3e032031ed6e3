"""The replication-portfolio MDP.

State is ``(k, cash, holdings, price, wealth)`` with costs folded into cash,
so ``wealth = p0 + cash + holdings * price``. Costs are kept as non-negative
magnitudes and subtracted. For the counting tasks (learn a fixed sequence,
or learn ``a_k = X_k``) the wealth slot carries the number of correct
actions so far instead of a P&L.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .market import ContractError


class DeadEndError(RuntimeError):
    """No action on the grid keeps cash inside its bounds."""


@dataclass(frozen=True)
class CostSpec:
    kind: str = "zero"  # zero | capped_proportional | quadratic
    rate: float = 0.0
    cap: float = 0.0
    coef: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "capped_proportional", "quadratic"):
            raise ValueError(f"unknown cost kind {self.kind!r}")

    def __call__(self, trade, price=1.0):
        trade = np.asarray(trade, dtype=float)
        if self.kind == "zero":
            out = np.zeros_like(trade)
        elif self.kind == "capped_proportional":
            out = np.minimum(self.rate * np.abs(trade), self.cap)
        else:
            out = self.coef * (trade * np.asarray(price)) ** 2
        return out if out.ndim else float(out)

    def grad(self, trade, price=1.0):
        """Derivative in the trade size; 0 at the kink points of the capped form."""
        trade = np.asarray(trade, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(trade)
        if self.kind == "capped_proportional":
            inside = self.rate * np.abs(trade) < self.cap
            return np.where(inside, self.rate * np.sign(trade), 0.0)
        price = np.asarray(price, dtype=float)
        return 2.0 * self.coef * trade * price**2


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "mse_loss"  # mse_loss | quadratic_utility | exponential
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mse_loss", "quadratic_utility", "exponential"):
            raise ValueError(f"unknown utility kind {self.kind!r}")

    def __call__(self, pl):
        pl = np.asarray(pl, dtype=float)
        if self.kind == "exponential":
            out = -self.a * np.exp(-self.b * pl)
        else:
            out = -(pl**2)
        return out if out.ndim else float(out)

    def grad(self, pl):
        pl = np.asarray(pl, dtype=float)
        if self.kind == "exponential":
            return self.a * self.b * np.exp(-self.b * pl)
        return -2.0 * pl


@dataclass(frozen=True)
class PayoffSpec:
    kind: str = "none"  # none | short_call
    strike: float = 0.0

    def __call__(self, price):
        if self.kind == "none":
            return np.zeros_like(np.asarray(price, dtype=float)) if np.ndim(price) else 0.0
        out = -np.maximum(np.asarray(price, dtype=float) - self.strike, 0.0)
        return out if out.ndim else float(out)

    def grad(self, price):
        if self.kind == "none":
            return np.zeros_like(np.asarray(price, dtype=float))
        return -(np.asarray(price) > self.strike).astype(float)


@dataclass(frozen=True)
class ConstraintSpec:
    action_grid: tuple
    cash_min: float | None = None
    cash_max: float | None = None

    def __post_init__(self):
        grid = np.asarray(self.action_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("action_grid must be non-empty and strictly increasing")
        if self.cash_min is not None and self.cash_max is not None and self.cash_min > self.cash_max:
            raise ValueError("cash_min exceeds cash_max")
        object.__setattr__(self, "action_grid", tuple(float(a) for a in grid))

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.action_grid)

    def cash_ok(self, cash):
        cash = np.asarray(cash)
        ok = np.ones(cash.shape, dtype=bool)
        if self.cash_min is not None:
            ok &= cash >= self.cash_min - 1e-12
        if self.cash_max is not None:
            ok &= cash <= self.cash_max + 1e-12
        return ok


@dataclass(frozen=True)
class MdpState:
    k: int
    cash: float
    holdings: float
    price: float
    wealth: float


@dataclass(frozen=True)
class ReplicationMdp:
    """Static description of one task.

    ``task`` is ``replication`` for P&L-driven tasks, ``sequence`` for a fixed
    target sequence and ``sign`` for targets equal to the current price.
    ``reward_scale`` is the loss magnitude mapped to a scaled reward of -1.
    """

    horizon: int
    constraints: ConstraintSpec
    cost: CostSpec = field(default_factory=CostSpec)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    payoff: PayoffSpec = field(default_factory=PayoffSpec)
    p0: float = 0.0
    init_cash: float = 0.0
    init_holdings: float = 0.0
    task: str = "replication"
    targets: tuple = ()
    reward_scale: float = 1.0
    decoy_gap: float = 0.125

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.task not in ("replication", "sequence", "sign"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "sequence" and len(self.targets) != self.horizon:
            raise ValueError("sequence task needs one target per step")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")

    @property
    def grid(self) -> np.ndarray:
        return self.constraints.grid

    @property
    def n_actions(self) -> int:
        return len(self.constraints.action_grid)

    @property
    def counting(self) -> bool:
        return self.task != "replication"

    def initial_state(self, price: float) -> MdpState:
        wealth = 0.0 if self.counting else self.p0 + self.init_cash + self.init_holdings * price
        return MdpState(0, self.init_cash, self.init_holdings, float(price), wealth)

    def target(self, state: MdpState) -> float:
        return self.targets[state.k] if self.task == "sequence" else state.price

    def with_root(self, state: MdpState) -> ReplicationMdp:
        """Same task re-rooted so that ``state`` is the initial decision state."""
        return replace(self, horizon=self.horizon - state.k, init_cash=state.cash, init_holdings=state.holdings)


def self_finance_cash(state: MdpState, new_holdings, cost: CostSpec):
    """Cash after moving to ``new_holdings``: the trade and its cost come out of cash."""
    trade = np.asarray(new_holdings, dtype=float) - state.holdings
    out = state.cash - trade * state.price - cost(trade, state.price)
    return out if np.ndim(out) else float(out)


def feasible_actions(state: MdpState, constraints: ConstraintSpec, cost: CostSpec) -> np.ndarray:
    """Indices of grid actions whose post-trade cash stays in bounds (grid order)."""
    cash = self_finance_cash(state, constraints.grid, cost)
    idx = np.flatnonzero(constraints.cash_ok(cash))
    if idx.size == 0:
        raise DeadEndError(f"no feasible action at {state}")
    return idx


def terminal_pl(
    path,
    actions,
    p0: float,
    cost: CostSpec,
    payoff: PayoffSpec,
    init_cash: float = 0.0,
    init_holdings: float = 0.0,
) -> float:
    """Terminal wealth ``p0 + Z_n + delta_n . X_n + sum_k c_k`` with signed costs c_k <= 0."""
    path = np.asarray(path, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if path.ndim != 1 or actions.ndim != 1 or path.size != actions.size + 1:
        raise ContractError(f"need len(path) == len(actions) + 1, got {path.size} and {actions.size}")
    held = np.concatenate([[init_holdings], actions])
    trades = np.diff(held)
    # Self-financing without costs: the portfolio value changes only through price moves.
    portfolio = init_cash + init_holdings * path[0] + float(np.sum(held[1:] * np.diff(path)))
    signed_costs = -np.asarray(cost(trades, path[:-1]), dtype=float)
    return float(p0 + payoff(path[-1]) + portfolio + signed_costs.sum())


def terminal_reward(pl, utility: UtilitySpec):
    """Utility of terminal P&L (``-PL**2`` for the squared-loss kinds)."""
    return utility(pl)


@dataclass(frozen=True)
class RewardScale:
    """How raw terminal rewards map into [-1, 1]."""

    kind: str = "loss"  # loss | count
    reference: float = 1.0
    n_steps: int = 1

    def __post_init__(self):
        if self.kind == "loss" and self.reference <= 0:
            raise ValueError("reference magnitude must be positive")


def scale_reward(raw, scheme: RewardScale):
    """Loss tasks: ``clamp(1 - 2*loss/L, -1, 1)`` with ``loss = -raw``. Counting tasks: ``2*hits/n - 1``."""
    raw = np.asarray(raw, dtype=float)
    if scheme.kind == "count":
        out = 2.0 * raw / scheme.n_steps - 1.0
    else:
        out = np.clip(1.0 + 2.0 * raw / scheme.reference, -1.0, 1.0)
    return out if out.ndim else float(out)


def decoy_loss(action, target, gap: float):
    """Squared distance to ``target`` with a lower decoy mode at ``-target``.

    ``min((a - t)**2, (a + t)**2 + gap)``; the decoy basin is what traps a
    deterministic gradient learner that starts on the wrong side of zero.
    """
    action = np.asarray(action, dtype=float)
    target = np.asarray(target, dtype=float)
    right = (action - target) ** 2
    wrong = (action + target) ** 2 + gap
    return np.minimum(right, wrong)


def decoy_loss_grad(action, target, gap: float):
    action = np.asarray(action, dtype=float)
    target = np.asarray(target, dtype=float)
    right = (action - target) ** 2
    wrong = (action + target) ** 2 + gap
    return np.where(right <= wrong, 2.0 * (action - target), 2.0 * (action + target))


class Environment:
    """An MDP paired with a source of market transitions.

    ``market`` needs ``initial_price``/``sample_next`` (and ``transitions`` for
    exact expectations). The search agents only talk to this class.
    """

    def __init__(self, mdp: ReplicationMdp, market):
        self.mdp = mdp
        self.market = market
        grid = mdp.grid
        self.grid = grid
        self.n_actions = grid.size
        self.scale = (
            RewardScale("count", n_steps=mdp.horizon) if mdp.counting else RewardScale("loss", mdp.reward_scale)
        )
        x0 = market.initial_price(np.random.default_rng(0)) if getattr(market, "informative", True) else 0.0
        self.price_scale = abs(x0) if mdp.task == "replication" and x0 != 0 else 1.0
        self._keyed_price = getattr(market, "informative", True)
        self._all = np.arange(self.n_actions)
        self._all.flags.writeable = False
        self._legal_memo: dict = {}

    # -- dynamics ---------------------------------------------------------
    def reset(self, rng: np.random.Generator | None = None, price: float | None = None) -> MdpState:
        if price is None:
            price = self.market.initial_price(rng)
        return self.mdp.initial_state(price)

    def legal(self, state: MdpState) -> np.ndarray:
        """Feasible action indices; empty for dead ends."""
        if self.mdp.counting:
            return self._all
        key = (state.cash, state.holdings, state.price)
        hit = self._legal_memo.get(key)
        if hit is None:
            if len(self._legal_memo) >= 500_000:
                self._legal_memo.clear()
            cash = self_finance_cash(state, self.grid, self.mdp.cost)
            hit = np.flatnonzero(self.mdp.constraints.cash_ok(cash))
            hit.flags.writeable = False
            self._legal_memo[key] = hit
        return hit

    def next_state(self, state: MdpState, action: int, next_price: float) -> MdpState:
        a = float(self.grid[action])
        mdp = self.mdp
        if mdp.counting:
            hit = 1.0 if abs(a - mdp.target(state)) < 1e-9 else 0.0
            return MdpState(state.k + 1, 0.0, a, float(next_price), state.wealth + hit)
        cash = self_finance_cash(state, a, mdp.cost)
        return MdpState(state.k + 1, cash, a, float(next_price), mdp.p0 + cash + a * next_price)

    def sample_price(self, state: MdpState, rng: np.random.Generator) -> float:
        return self.market.sample_next(state.k, state.price, rng)

    def is_terminal(self, state: MdpState) -> bool:
        return state.k >= self.mdp.horizon or self.legal(state).size == 0

    def raw_reward(self, state: MdpState) -> float:
        """Unscaled terminal reward (utility of P&L, or the hit count)."""
        mdp = self.mdp
        if mdp.counting:
            return state.wealth
        if state.k < mdp.horizon:
            return -mdp.reward_scale  # dead end
        return float(mdp.utility(state.wealth + mdp.payoff(state.price)))

    def outcome(self, state: MdpState) -> float:
        """Scaled terminal reward in [-1, 1]; dead ends score -1."""
        if not self.mdp.counting and state.k < self.mdp.horizon:
            return -1.0
        return scale_reward(self.raw_reward(state), self.scale)

    def terminal_loss(self, state: MdpState) -> float:
        return -self.raw_reward(state)

    # -- encodings --------------------------------------------------------
    @property
    def n_features(self) -> int:
        return 5

    def features(self, state: MdpState) -> np.ndarray:
        n = self.mdp.horizon
        price = state.price / self.price_scale if self._keyed_price else 0.0
        return np.array([state.k / n, state.holdings, price, state.cash, state.wealth / (n if self.mdp.counting else 1.0)])

    def key(self, state: MdpState) -> tuple:
        price = round(state.price, 6) if self._keyed_price else None
        return (state.k, round(state.cash, 6), round(state.holdings, 9), price, round(state.wealth, 6))
