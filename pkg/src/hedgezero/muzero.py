"""MuZero-style agent that plans inside a learned market model.

Only the market kernel is learned: the rest of the state moves
deterministically given the price. The model predicts the probabilities of
one tick up, no move, and one tick down from ``(time, price)``. Planning
samples from the model, the environment steps along reservoir paths, and
evaluation uses the policy head alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .deephedge import DhConfig, PathSource, PolicyStack, evaluate as dh_evaluate, train as dh_train
from .market import ContractError, PathReservoir
from .mcts import (AlphaZeroConfig, NetworkEvaluator, ReplayBuffer, SearchConfig, make_network, greedy_head_play,
                   sims_per_move, train_cycle)
from .neural import AdamState, Mlp, adam_step, kl_divergence
from .replication import Environment, ReplicationMdp
from .rng import make_rng

log = logging.getLogger(__name__)

MOVES = (1, 0, -1)  # up, mid, down in ticks


def mz_score(qhat: float, prior: float, n_s: int, n_sa: int, w1: float = 1.25, w2: float = 19652.0) -> float:
    """``qhat + prior * sqrt(ln n_s) / (n_sa + 1) * (w1 + ln((n_s + w2 + 1) / w2))``."""
    if w2 <= 0:
        raise ValueError("w2 must be positive")
    bonus = prior * math.sqrt(math.log(max(n_s, 1))) / (n_sa + 1)
    return qhat + bonus * (w1 + math.log((n_s + w2 + 1) / w2))


# -- empirical transitions -----------------------------------------------------
@dataclass
class TransitionCounts:
    """Observed moves per (time, price) state of a reservoir."""

    times: np.ndarray
    prices: np.ndarray
    counts: np.ndarray  # (n_states, 3) in MOVES order

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def freqs(self) -> np.ndarray:
        return self.counts / self.totals[:, None]


def count_transitions(reservoir: PathReservoir, tick: float) -> TransitionCounts:
    paths = reservoir.paths
    n = reservoir.horizon
    steps = np.rint((paths[:, 1:] - paths[:, :-1]) / tick).astype(int)
    if np.any(np.abs(steps) > 1):
        raise ContractError("reservoir contains moves larger than one tick")
    t = np.broadcast_to(np.arange(n), steps.shape).ravel()
    p = np.round(paths[:, :-1], 6).ravel()
    col = 1 - steps.ravel()  # +1 -> 0 (up), 0 -> 1, -1 -> 2 (down)
    keys, inv = np.unique(np.stack([t, p], axis=1), axis=0, return_inverse=True)
    counts = np.zeros((keys.shape[0], 3))
    np.add.at(counts, (inv.ravel(), col), 1.0)
    return TransitionCounts(keys[:, 0].astype(int), keys[:, 1], counts)


# -- dynamics model ----------------------------------------------------------------
@dataclass
class DynamicsConfig:
    hidden: int = 512
    layers: int = 4
    epochs: int = 5000
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class DynamicsModel:
    net: Mlp
    horizon: int
    price_scale: float
    tick: float
    floor: float
    loss_curve: list = field(default_factory=list)
    covered: set = field(default_factory=set)
    _cache: dict = field(default_factory=dict, repr=False)

    def features(self, t, price) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        price = np.atleast_1d(np.asarray(price, float))
        return np.stack([t / self.horizon, price / self.price_scale], axis=1)

    def predict(self, t, price) -> np.ndarray:
        """(p_up, p_mid, p_down) for each probe."""
        return self.net.forward(self.features(t, price))["p"]

    def probs(self, t: int, price: float) -> np.ndarray:
        key = (int(t), round(float(price), 6))
        out = self._cache.get(key)
        if out is None:
            out = self.predict(t, price)[0]
            self._cache[key] = out
        return out

    def sample_next(self, t: int, price: float, rng: np.random.Generator) -> float:
        j = int(rng.choice(3, p=self.probs(t, price)))
        return max(round(price + MOVES[j] * self.tick, 10), self.floor)

    def sampler(self, state, rng) -> float:
        return self.sample_next(state.k, state.price, rng)

    def is_covered(self, t: int, price: float) -> bool:
        return (int(t), round(float(price), 6)) in self.covered


def fit_dynamics(reservoir: PathReservoir, config: DynamicsConfig, tick: float, floor: float = 0.0,
                 seed: int = 0) -> DynamicsModel:
    """Fit move probabilities by count-weighted KL to the empirical frequencies."""
    if len(reservoir) == 0:
        raise ContractError("empty reservoir")
    counts = count_transitions(reservoir, tick)
    rng = make_rng(seed, 4)
    net = Mlp(2, [config.hidden] * config.layers, [("p", "softmax", 3)], "leaky_relu", "layer_norm",
              seed=int(rng.integers(2**63)))
    model = DynamicsModel(net, reservoir.horizon, float(abs(reservoir.paths[0, 0]) or 1.0), tick, floor)
    model.covered = {(int(t), round(float(p), 6)) for t, p in zip(counts.times, counts.prices)}
    x = model.features(counts.times, counts.prices)
    target = counts.freqs
    weight = counts.totals
    state = AdamState(lr=config.lr)
    params = net.params()
    m = x.shape[0]
    for _ in range(config.epochs):
        perm = rng.permutation(m)
        tot = 0.0
        for s in range(0, m, config.batch_size):
            idx = perm[s:s + config.batch_size]
            outs, cache = net.forward(x[idx], "train")
            loss, g = kl_divergence(outs["p"], target[idx], weight[idx])
            grads, _ = net.backward(cache, {"p": g})
            adam_step(params, grads, state, net)
            tot += loss * idx.size
        model.loss_curve.append(tot / m)
    model._cache.clear()
    return model


def empirical_fit_error(model: DynamicsModel, reservoir: PathReservoir, min_count: int = 100) -> float:
    """Largest total-variation gap to empirical frequencies over states with at least ``min_count`` moves."""
    counts = count_transitions(reservoir, model.tick)
    keep = counts.totals >= min_count
    if not keep.any():
        return 0.0
    pred = model.predict(counts.times[keep], counts.prices[keep])
    return float(0.5 * np.abs(pred - counts.freqs[keep]).sum(axis=1).max())


# -- data isolation ------------------------------------------------------------------
class KernelGuard:
    """Stands in for the true market: knows the start price, counts and refuses any other query."""

    def __init__(self, start_price: float, model_id: str = "reservoir"):
        self.start_price = float(start_price)
        self.model_id = model_id
        self.informative = True
        self.queries = 0

    def initial_price(self, rng=None) -> float:
        return self.start_price

    def sample_next(self, k, price, rng):
        self.queries += 1
        raise ContractError("the true market kernel is off limits during reservoir training")

    def transitions(self, k, price):
        self.queries += 1
        raise ContractError("the true market kernel is off limits during reservoir training")


class ReservoirFeed:
    """Hands out reservoir paths in shuffled order, reshuffling when exhausted."""

    def __init__(self, reservoir: PathReservoir, rng: np.random.Generator):
        self.reservoir = reservoir
        self.rng = rng
        self.order = rng.permutation(len(reservoir))
        self.pos = 0
        self.wraps = 0
        self.transitions = 0

    def __call__(self, rng=None) -> np.ndarray:
        if self.pos >= self.order.size:
            self.order = self.rng.permutation(len(self.reservoir))
            self.pos = 0
            self.wraps += 1
            log.info("reservoir exhausted; reshuffled (wrap %d)", self.wraps)
        path = self.reservoir.paths[self.order[self.pos]]
        self.pos += 1
        self.transitions += self.reservoir.horizon
        return path


# -- training -------------------------------------------------------------------
@dataclass
class MuZeroConfig:
    agent: AlphaZeroConfig = field(default_factory=lambda: AlphaZeroConfig(
        hidden=512, cycles=40, episodes_per_cycle=500, validation_paths=10_000))
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    w1: float = 1.25
    w2: float = 19652.0
    tick: float = 0.05
    floor: float = 0.05


@dataclass
class MuZeroRun:
    net: Mlp
    model: DynamicsModel
    reports: list
    feed: ReservoirFeed
    guard: KernelGuard


def train_on_reservoir(reservoir: PathReservoir, mdp: ReplicationMdp, cfg: MuZeroConfig, seed: int,
                       sampler_override=None) -> MuZeroRun:
    """Fit the dynamics model, then gated self-play planning in it while stepping along reservoir paths.

    Validation replays the training reservoir with the policy head; the true
    kernel is never consulted. ``sampler_override`` swaps the learned model
    for another planning sampler (used for ablations).
    """
    rng = make_rng(seed, 5)
    guard = KernelGuard(reservoir.paths[0, 0])
    env = Environment(mdp, guard)
    model = fit_dynamics(reservoir, cfg.dynamics, cfg.tick, cfg.floor, seed=int(rng.integers(2**63)))
    sampler = sampler_override or model.sampler
    acfg = cfg.agent
    net = make_network(env, acfg, int(rng.integers(2**63)))
    buffer = ReplayBuffer(acfg.buffer_capacity(mdp.horizon), env.n_features, env.n_actions)
    feed = ReservoirFeed(reservoir, make_rng(seed, 6))
    scfg = SearchConfig(sims_per_move(acfg.sims, acfg.sims_mode, mdp.horizon), acfg.w, "muzero", cfg.w1, cfg.w2)
    val_paths = reservoir.paths
    reports = []
    incumbent = None
    for _ in range(acfg.cycles):
        net, accepted, rep = train_cycle(net, env, acfg, buffer, val_paths, rng, incumbent, search_cfg=scfg,
                                         episode_paths=feed, sampler=sampler)
        incumbent = rep.candidate_reward if accepted else rep.incumbent_reward
        reports.append(rep)
    return MuZeroRun(net, model, reports, feed, guard)


def policy_head_losses(net: Mlp, env: Environment, paths) -> np.ndarray:
    """Terminal losses of search-free greedy play with the policy head."""
    return np.array([env.terminal_loss(s) for s in greedy_head_play(net, env, paths)])


# -- sample efficiency -------------------------------------------------------------------
def percentile(values, q: float) -> float:
    """Linear interpolation between closest ranks of the sorted values."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no values")
    pos = (v.size - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def summarize(values) -> dict:
    return {"mean": float(np.mean(values)), "p5": percentile(values, 5), "p95": percentile(values, 95)}


@dataclass
class SampleEfficiencyResult:
    rows: list  # (agent, size, run, eval_mean_loss)
    table: dict  # (agent, size) -> summary

    def to_csv(self) -> str:
        lines = ["agent,reservoir_size,run,eval_mean_loss"]
        lines += [f"{a},{s},{r},{v:.10g}" for a, s, r, v in self.rows]
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        lines = ["agent,reservoir_size,mean,p5,p95"]
        for (a, s), st in sorted(self.table.items()):
            lines.append(f"{a},{s},{st['mean']:.10g},{st['p5']:.10g},{st['p95']:.10g}")
        return "\n".join(lines) + "\n"


def sample_efficiency_experiment(reservoir: PathReservoir, mdp: ReplicationMdp, sizes, n_runs: int,
                                 dh_cfg: DhConfig, mz_cfg: MuZeroConfig, n_eval: int = 1000, seed: int = 0,
                                 scale: float = 1.0, agents=("dh", "muzero")) -> SampleEfficiencyResult:
    """Train both agents on identical fresh train subsets; score them on a disjoint eval subset."""
    rows = []
    for size in sizes:
        for run in range(n_runs):
            rng = make_rng(seed, 7, int(size), run)
            train_res, eval_res = reservoir.split(int(size), n_eval, rng)
            guard = KernelGuard(train_res.paths[0, 0])
            env = Environment(mdp, guard)
            run_seed = int(rng.integers(2**63))
            if "dh" in agents:
                stack = PolicyStack(env, dh_cfg, seed=run_seed)
                dh_train(stack, PathSource(reservoir=train_res), dh_cfg, seed=run_seed, scale=scale)
                rows.append(("dh", int(size), run, dh_evaluate(stack, eval_res.paths).mean_loss))
            if "muzero" in agents:
                out = train_on_reservoir(train_res, mdp, mz_cfg, run_seed)
                rows.append(("muzero", int(size), run, float(policy_head_losses(out.net, env, eval_res.paths).mean())))
    table = {}
    for agent in agents:
        for size in sizes:
            vals = [v for a, s, _, v in rows if a == agent and s == int(size)]
            table[(agent, int(size))] = summarize(vals)
    return SampleEfficiencyResult(rows, table)


def scaled_config(cfg: MuZeroConfig, scale: float, dynamics_epochs: int | None = None) -> MuZeroConfig:
    dyn = cfg.dynamics if dynamics_epochs is None else replace(cfg.dynamics, epochs=dynamics_epochs)
    return replace(cfg, agent=cfg.agent.scaled(scale), dynamics=dyn)
