"""Deep hedging: one deterministic policy network per decision time.

Actions feed the next state, so the whole stack is trained end-to-end
through the cash/holdings recursion. Gradients are pushed back by hand
through every step, including the transaction-cost terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market import ContractError
from .neural import AdamState, Mlp, adam_step
from .replication import Environment, ReplicationMdp, decoy_loss, decoy_loss_grad
from .rng import make_rng

INPUTS = ("prev_action", "price", "time", "cash")


@dataclass
class DhConfig:
    hidden: int = 64
    layers: int = 2
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    total_games: int = 150_000
    activation: str = "relu"
    inputs: tuple = ("prev_action", "price")

    def __post_init__(self):
        bad = set(self.inputs) - set(INPUTS)
        if bad or "prev_action" not in self.inputs:
            raise ValueError(f"inputs must include prev_action and be drawn from {INPUTS}")
        self.inputs = tuple(self.inputs)


class PolicyStack:
    """Networks F_0..F_{n-1}; F_k maps state features to a tanh output in [-1, 1].

    The tanh output is mapped affinely onto ``[min(grid), max(grid)]``.
    """

    def __init__(self, env: Environment, config: DhConfig, seed: int = 0):
        self.env = env
        self.mdp: ReplicationMdp = env.mdp
        self.config = config
        self.lo = float(env.grid.min())
        self.hi = float(env.grid.max())
        rng = make_rng(seed, 1)
        self.nets = [
            Mlp(len(config.inputs), [config.hidden] * config.layers, [("a", "scalar_tanh", 1)],
                config.activation, "none", seed=int(rng.integers(2**63)))
            for _ in range(self.mdp.horizon)
        ]
        self._col = {name: i for i, name in enumerate(config.inputs)}

    @property
    def horizon(self) -> int:
        return len(self.nets)

    def params(self) -> list:
        return [p for net in self.nets for p in net.params()]

    def bump(self) -> None:
        for net in self.nets:
            net.version += 1

    def features(self, k: int, prev, price, cash) -> np.ndarray:
        b = prev.shape[0]
        x = np.empty((b, len(self.config.inputs)))
        scale = self.env.price_scale
        for name, j in self._col.items():
            if name == "prev_action":
                x[:, j] = prev
            elif name == "price":
                x[:, j] = price / scale
            elif name == "time":
                x[:, j] = k / self.mdp.horizon
            else:
                x[:, j] = cash
        return x

    def to_action(self, u):
        return self.lo + 0.5 * (u + 1.0) * (self.hi - self.lo)

    def act(self, k: int, prev, price, cash):
        out = self.nets[k].forward(self.features(k, prev, price, cash))["a"][:, 0]
        return self.to_action(out)


@dataclass
class Rollout:
    actions: np.ndarray  # (B, n)
    pl: np.ndarray | None  # terminal P&L, market tasks only
    losses: np.ndarray  # per-path loss
    loss: float
    tape: list = field(repr=False, default_factory=list)


def _targets(mdp: ReplicationMdp, paths: np.ndarray) -> np.ndarray:
    if mdp.task == "sequence":
        return np.broadcast_to(np.asarray(mdp.targets, float), (paths.shape[0], mdp.horizon))
    return paths[:, :-1]


def rollout(stack: PolicyStack, paths, train: bool = True) -> Rollout:
    """Run the stack along a batch of paths ``(B, n + 1)``."""
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    mdp = stack.mdp
    n = mdp.horizon
    if paths.shape[1] != n + 1:
        raise ContractError(f"paths need {n + 1} prices, got {paths.shape[1]}")
    b = paths.shape[0]
    prev = np.full(b, mdp.init_holdings, dtype=float)
    cash = np.full(b, mdp.init_cash, dtype=float)
    actions = np.empty((b, n))
    tape = []
    for k in range(n):
        x = stack.features(k, prev, paths[:, k], cash)
        if train:
            outs, cache = stack.nets[k].forward(x, "train")
        else:
            outs, cache = stack.nets[k].forward(x, "eval"), None
        u = outs["a"][:, 0]
        a = stack.to_action(u)
        trade = a - prev
        tape.append((cache, prev, cash, trade))
        if not mdp.counting:
            cash = cash - trade * paths[:, k] - mdp.cost(trade, paths[:, k])
        actions[:, k] = a
        prev = a
    if mdp.counting:
        per = decoy_loss(actions, _targets(mdp, paths), mdp.decoy_gap).sum(axis=1)
        pl = None
    else:
        pl = mdp.p0 + cash + prev * paths[:, -1] + mdp.payoff(paths[:, -1])
        per = -mdp.utility(pl)
    return Rollout(actions, pl, per, float(per.mean()), tape)


def backward(stack: PolicyStack, paths, ro: Rollout) -> list:
    """Gradient of ``ro.loss`` w.r.t. every stack parameter (order of :meth:`PolicyStack.params`)."""
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    mdp = stack.mdp
    n = mdp.horizon
    b = paths.shape[0]
    half = 0.5 * (stack.hi - stack.lo)
    col = stack._col
    grads_per_net = [None] * n
    if mdp.counting:
        g_act = decoy_loss_grad(ro.actions, _targets(mdp, paths), mdp.decoy_gap) / b
        g_cash = np.zeros(b)
        g_hold = np.zeros(b)
    else:
        g_pl = -mdp.utility.grad(ro.pl) / b
        g_cash = g_pl.copy()
        g_hold = g_pl * paths[:, -1]
    for k in range(n - 1, -1, -1):
        cache, prev, cash, trade = ro.tape[k]
        price = paths[:, k]
        if mdp.counting:
            da = g_act[:, k] + g_hold
            g_prev_direct = np.zeros(b)
        else:
            dcost = mdp.cost.grad(trade, price)
            da = g_hold - g_cash * (price + dcost)
            g_prev_direct = g_cash * (price + dcost)
        pgrads, dx = stack.nets[k].backward(cache, {"a": (da * half)[:, None]})
        grads_per_net[k] = pgrads
        g_hold = g_prev_direct + dx[:, col["prev_action"]]
        if "cash" in col:
            g_cash = g_cash + dx[:, col["cash"]]
    return [g for gs in grads_per_net for g in gs]


def loss_and_grad(stack: PolicyStack, paths):
    ro = rollout(stack, paths, train=True)
    return ro.loss, backward(stack, paths, ro)


class PathSource:
    """Training paths drawn from a market model or resampled from a reservoir."""

    def __init__(self, market=None, reservoir=None, horizon: int | None = None):
        if (market is None) == (reservoir is None):
            raise ValueError("give exactly one of market or reservoir")
        self.market = market
        self.reservoir = reservoir
        self.horizon = reservoir.horizon if reservoir is not None else horizon

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.reservoir is not None:
            return self.reservoir.paths[rng.integers(len(self.reservoir), size=n)]
        out = np.empty((n, self.horizon + 1))
        for i in range(n):
            x = self.market.initial_price(rng)
            out[i, 0] = x
            for k in range(self.horizon):
                x = self.market.sample_next(k, x, rng)
                out[i, k + 1] = x
        return out


def train(stack: PolicyStack, source: PathSource, config: DhConfig | None = None, seed: int = 0,
          scale: float = 1.0) -> tuple[PolicyStack, list]:
    """Adam on mini-batches; returns the stack and the per-epoch mean training loss."""
    config = config or stack.config
    rng = make_rng(seed, 2)
    state = AdamState(lr=config.lr)
    per_epoch = max(1, int(round(config.total_games * scale / config.epochs)))
    n_batches = max(1, -(-per_epoch // config.batch_size))
    curve = []
    params = stack.params()
    for _ in range(config.epochs):
        total = 0.0
        for _ in range(n_batches):
            paths = source.draw(config.batch_size, rng)
            loss, grads = loss_and_grad(stack, paths)
            total += loss
            adam_step(params, grads, state)
            stack.bump()
        curve.append(total / n_batches)
    return stack, curve


def snap(actions, grid) -> np.ndarray:
    """Nearest grid index; exact midpoints go to the lower index."""
    grid = np.asarray(grid, dtype=float)
    a = np.asarray(actions, dtype=float)
    hi = np.clip(np.searchsorted(grid, a, side="left"), 1, grid.size - 1)
    lo = hi - 1
    return np.where(a - grid[lo] <= grid[hi] - a, lo, hi) if grid.size > 1 else np.zeros_like(a, dtype=int)


@dataclass
class DhEvaluation:
    mean_loss: float
    histogram: np.ndarray  # counts per grid index of the first action
    hits: np.ndarray | None  # correct snapped actions per path (counting tasks)
    success_rate: float | None  # fraction of paths with every action correct

    @property
    def modal_action(self) -> int:
        return int(np.argmax(self.histogram))


def evaluate(stack: PolicyStack, paths) -> DhEvaluation:
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    ro = rollout(stack, paths, train=False)
    grid = stack.env.grid
    idx = snap(ro.actions, grid)
    hist = np.bincount(idx[:, 0], minlength=grid.size)
    hits = success = None
    if stack.mdp.counting:
        correct = np.abs(grid[idx] - _targets(stack.mdp, paths)) < 1e-9
        hits = correct.sum(axis=1)
        success = float(np.mean(hits == stack.mdp.horizon))
    return DhEvaluation(ro.loss, hist, hits, success)
