"""UCT and AlphaZero search over the replication MDP.

Every decision edge leads to a chance node whose children are keyed by the
sampled market outcome. Rewards are terminal only and scaled into [-1, 1],
so the backed-up return of a simulation is just its leaf value.
"""

from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass, field

import numpy as np

from .market import ContractError
from .neural import AdamState, Mlp, adam_step, tree_policy_loss, value_loss
from .replication import DeadEndError, Environment, MdpState, scale_reward
from .rng import make_rng


# -- scores ------------------------------------------------------------------
def ucb1(mean: float, n: int, n_a: int, w: float) -> float:
    """``mean + w * sqrt(ln n / n_a)``; unvisited arms score +inf."""
    if n_a == 0:
        return math.inf
    return mean + w * math.sqrt(math.log(n) / n_a)


def az_score(qhat: float, prior: float, n_s: int, n_sa: int, w: float) -> float:
    """``qhat + w * prior * sqrt(ln n_s) / (n_sa + 1)``."""
    return qhat + w * prior * math.sqrt(math.log(max(n_s, 1))) / (n_sa + 1)


# -- tree --------------------------------------------------------------------
class Node:
    __slots__ = ("state", "legal", "prior", "N", "W", "n_visits", "value", "children", "terminal")

    def __init__(self, state: MdpState, n_actions: int):
        self.state = state
        self.legal = None
        self.prior = None
        self.N = np.zeros(n_actions)
        self.W = np.zeros(n_actions)
        self.n_visits = 0
        self.value = 0.0
        self.children: dict = {}
        self.terminal = False

    @property
    def expanded(self) -> bool:
        return self.legal is not None

    def q(self) -> np.ndarray:
        """Mean backed-up return per edge; unvisited edges fall back on the node value."""
        return np.where(self.N > 0, self.W / np.maximum(self.N, 1), self.value)


@dataclass
class SearchResult:
    visits: np.ndarray
    q: np.ndarray
    root: Node
    trace: list = field(default_factory=list)

    @property
    def policy(self) -> np.ndarray:
        return self.visits / self.visits.sum()

    def best(self) -> int:
        """Most visited action, lowest index on ties."""
        return int(np.argmax(self.visits))


# -- leaf evaluators ---------------------------------------------------------
_NET_MEMO: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


class NetworkEvaluator:
    """Priors and values from a policy/value network (heads ``p`` and ``v``)."""

    def __init__(self, net: Mlp, env: Environment):
        self.net = net
        self.env = env
        # shared by every evaluator of the same (unchanged) network and environment
        memo = _NET_MEMO.get(net)
        if memo is None or memo[0] != net.version or memo[1] is not env:
            memo = (net.version, env, {})
            _NET_MEMO[net] = memo
        self._cache: dict = memo[2]

    def __call__(self, state: MdpState, legal: np.ndarray, rng=None):
        key = self.env.key(state)
        hit = self._cache.get(key)
        if hit is None:
            out = self.net.infer(self.env.features(state)[None, :])
            hit = (out["p"][0], float(out["v"][0, 0]))
            self._cache[key] = hit
        p, v = hit
        prior = np.zeros_like(p)
        prior[legal] = p[legal]
        s = prior.sum()
        prior = prior / s if s > 0 else _uniform(legal, p.size)
        return prior, v


def _uniform(legal, n):
    out = np.zeros(n)
    out[legal] = 1.0 / legal.size
    return out


class RolloutEvaluator:
    """Plain UCT: uniform priors, value from one uniformly random rollout."""

    def __init__(self, env: Environment, sampler=None):
        self.env = env
        self.sampler = sampler or env.sample_price

    def __call__(self, state: MdpState, legal: np.ndarray, rng):
        env = self.env
        s = state
        while not env.is_terminal(s):
            acts = env.legal(s)
            a = int(acts[rng.integers(acts.size)])
            s = env.next_state(s, a, self.sampler(s, rng))
        return _uniform(legal, env.n_actions), env.outcome(s)


class DpOracleEvaluator:
    """Exact values from a solved lattice; priors are a softmax of Q* over feasible actions."""

    def __init__(self, table, env: Environment, temperature: float = 1e-3):
        self.table = table
        self.env = env
        self.temperature = temperature

    def __call__(self, state: MdpState, legal: np.ndarray, rng=None):
        q = self.table.q(state)
        scaled = scale_reward(np.where(np.isnan(q), -np.inf, q), self.env.scale)
        z = (scaled[legal] - scaled[legal].max()) / self.temperature
        prior = np.zeros(self.env.n_actions)
        prior[legal] = np.exp(z) / np.exp(z).sum()
        return prior, float(scale_reward(self.table.v(state), self.env.scale))


# -- search ------------------------------------------------------------------
@dataclass
class SearchConfig:
    n_sims: int = 25
    w: float = 1.0
    score: str = "alphazero"  # alphazero | ucb1 | muzero
    w1: float = 1.25
    w2: float = 19652.0


def _select(node: Node, cfg: SearchConfig) -> int:
    legal = node.legal
    n_sa = node.N[legal]
    if cfg.score == "ucb1":
        unvisited = np.flatnonzero(n_sa == 0)
        if unvisited.size:
            return int(legal[unvisited[0]])
        mean = node.W[legal] / n_sa
        scores = mean + cfg.w * np.sqrt(math.log(node.n_visits) / n_sa)
        return int(legal[int(np.argmax(scores))])
    q = node.q()[legal]
    bonus = node.prior[legal] * math.sqrt(math.log(max(node.n_visits, 1))) / (n_sa + 1)
    if cfg.score == "muzero":
        scores = q + bonus * (cfg.w1 + math.log((node.n_visits + cfg.w2 + 1) / cfg.w2))
    else:
        scores = q + cfg.w * bonus
    best = scores.max()
    tied = np.flatnonzero(scores >= best - 1e-12)
    if tied.size > 1:
        pri = node.prior[legal][tied]
        tied = tied[pri >= pri.max() - 1e-15]
    return int(legal[tied[0]])


def _expand(node: Node, env: Environment, evaluator, rng) -> float:
    done = node.state.k >= env.mdp.horizon
    legal = np.arange(0) if done else env.legal(node.state)
    node.legal = legal
    if done or legal.size == 0:
        node.terminal = True
        node.value = env.outcome(node.state)
        return node.value
    prior, value = evaluator(node.state, legal, rng)
    node.prior = prior
    node.value = float(value)
    return node.value


def _outcome_key(env: Environment, price: float):
    return round(price, 6) if env._keyed_price else None


def search(root_state: MdpState, env: Environment, evaluator, cfg: SearchConfig, rng: np.random.Generator,
           sampler=None, trace: bool = False) -> SearchResult:
    """Run ``cfg.n_sims`` simulations from ``root_state``; returns root visit counts."""
    if cfg.n_sims < 1:
        raise ContractError("n_sims must be at least 1")
    if env.is_terminal(root_state):
        if root_state.k < env.mdp.horizon:
            raise DeadEndError(f"root {root_state} has no feasible action")
        raise ContractError("root state is terminal")
    sampler = sampler or env.sample_price
    root = Node(root_state, env.n_actions)
    _expand(root, env, evaluator, rng)
    log = []
    for sim in range(cfg.n_sims):
        node = root
        path = []
        keys = []
        while True:
            a = _select(node, cfg)
            price = sampler(node.state, rng)
            okey = _outcome_key(env, price)
            branch = node.children.setdefault(a, {})
            child = branch.get(okey)
            path.append((node, a))
            keys.append([a, okey])
            if child is None:
                child = Node(env.next_state(node.state, a, price), env.n_actions)
                branch[okey] = child
                value = _expand(child, env, evaluator, rng)
                break
            if child.terminal:
                value = child.value
                break
            node = child
        for nd, a in path:
            nd.n_visits += 1
            nd.N[a] += 1
            nd.W[a] += value
        if trace:
            log.append({"sim": sim, "path": keys, "leaf_value": value, "backed_up": value})
    return SearchResult(root.N.copy(), root.q(), root, log)


def write_trace(path, trace: list) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- replay ------------------------------------------------------------------
class ReplayBuffer:
    """Ring buffer of (features, visit distribution, outcome)."""

    def __init__(self, capacity: int, n_features: int, n_actions: int):
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, n_features))
        self.pi = np.zeros((self.capacity, n_actions))
        self.z = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, x, pi, z) -> None:
        i = self._next
        self.x[i] = x
        self.pi[i] = pi
        self.z[i] = z
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, entries) -> None:
        for x, pi, z in entries:
            self.add(x, pi, z)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.choice(self.size, size=min(batch, self.size), replace=False)
        return self.x[idx].copy(), self.pi[idx].copy(), self.z[idx].copy()

    def batches(self, batch: int, rng: np.random.Generator):
        """One pass over the buffer in shuffled mini-batches."""
        perm = rng.permutation(self.size)
        for s in range(0, self.size, batch):
            idx = perm[s:s + batch]
            if idx.size < 2:
                continue
            yield self.x[idx], self.pi[idx], self.z[idx]


# -- self-play ---------------------------------------------------------------
def sims_per_move(cfg_sims: int, mode: str, horizon: int) -> int:
    if mode == "per_move":
        return cfg_sims
    if mode == "per_episode":
        return max(1, cfg_sims // horizon)
    raise ValueError(f"unknown simulation mode {mode!r}")


def self_play_episode(env: Environment, evaluator, cfg: SearchConfig, rng: np.random.Generator,
                      path=None, sampler=None, price_feed=None):
    """Play one episode, sampling moves from root visit distributions.

    Market steps follow ``path`` when given, else ``price_feed(state, rng)``,
    else the environment's own sampler. Returns ``(entries, final_state)``
    where each entry is ``(features, visit_distribution, z)``.
    """
    state = env.reset(rng, None if path is None else float(path[0]))
    xs, pis = [], []
    while not env.is_terminal(state):
        res = search(state, env, evaluator, cfg, rng, sampler=sampler)
        pi = res.policy
        xs.append(env.features(state))
        pis.append(pi)
        a = int(rng.choice(pi.size, p=pi))
        if path is not None:
            price = float(path[state.k + 1])
        elif price_feed is not None:
            price = price_feed(state, rng)
        else:
            price = env.sample_price(state, rng)
        state = env.next_state(state, a, price)
    z = env.outcome(state)
    return [(x, p, z) for x, p in zip(xs, pis)], state


# -- policies and validation -------------------------------------------------
def greedy_head_action(net: Mlp, env: Environment, state: MdpState) -> int:
    p = net.forward(env.features(state)[None, :])["p"][0]
    legal = env.legal(state)
    return int(legal[int(np.argmax(p[legal]))])


def play_paths(env: Environment, paths, choose) -> list:
    """Final states of episodes driven by ``choose(state) -> action`` along fixed price paths."""
    finals = []
    for row in np.atleast_2d(paths):
        s = env.reset(price=float(row[0]))
        while not env.is_terminal(s):
            s = env.next_state(s, choose(s), float(row[s.k + 1]))
        finals.append(s)
    return finals


def greedy_head_play(net: Mlp, env: Environment, paths) -> list:
    """Final states of search-free greedy play with the policy head along fixed price paths.

    Episodes advance in lockstep so each step costs one batched forward pass
    over the distinct live states.
    """
    paths = np.atleast_2d(paths)
    states = [env.reset(price=float(r[0])) for r in paths]
    live = [i for i, st in enumerate(states) if not env.is_terminal(st)]
    while live:
        slot: dict = {}
        distinct = []
        for i in live:
            key = env.key(states[i])
            if key not in slot:
                slot[key] = len(distinct)
                distinct.append(states[i])
        probs = net.forward(np.stack([env.features(st) for st in distinct]))["p"]
        acts = []
        for j, st in enumerate(distinct):
            legal = env.legal(st)
            acts.append(int(legal[int(np.argmax(probs[j, legal]))]))
        nxt = []
        for i in live:
            st = states[i]
            st = env.next_state(st, acts[slot[env.key(st)]], float(paths[i, st.k + 1]))
            states[i] = st
            if not env.is_terminal(st):
                nxt.append(i)
        live = nxt
    return states


def validate(net: Mlp, env: Environment, paths) -> float:
    """Mean scaled terminal reward of the search-free greedy policy head."""
    return float(np.mean([env.outcome(s) for s in greedy_head_play(net, env, paths)]))


# -- training ----------------------------------------------------------------
@dataclass
class AlphaZeroConfig:
    hidden: int = 256
    layers: int = 4
    activation: str = "relu"
    norm: str = "batch_norm"
    cycles: int = 30
    episodes_per_cycle: int = 5000
    sims: int = 25
    sims_mode: str = "per_move"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    validation_paths: int = 10_000
    w: float = 1.0
    buffer_cycles: int = 2
    eval_paths: int = 100

    def buffer_capacity(self, horizon: int) -> int:
        """Replay window holding the positions of the last ``buffer_cycles`` cycles."""
        return max(1, self.buffer_cycles * self.episodes_per_cycle * horizon)

    def scaled(self, scale: float) -> AlphaZeroConfig:
        from dataclasses import replace

        if not 0 < scale <= 1:
            raise ValueError("scale must lie in (0, 1]")
        return replace(
            self,
            episodes_per_cycle=max(1, int(round(self.episodes_per_cycle * scale))),
            validation_paths=max(1, int(round(self.validation_paths * scale))),
        )


def make_network(env: Environment, cfg: AlphaZeroConfig, seed: int) -> Mlp:
    return Mlp(env.n_features, [cfg.hidden] * cfg.layers,
               [("v", "scalar_tanh", 1), ("p", "softmax", env.n_actions)], cfg.activation, cfg.norm, seed=seed)


def fit_network(net: Mlp, buffer: ReplayBuffer, epochs: int, batch_size: int, lr: float,
                rng: np.random.Generator) -> list:
    """Joint value + tree-policy loss, Adam; returns per-epoch mean loss."""
    state = AdamState(lr=lr)
    params = net.params()
    curve = []
    for _ in range(epochs):
        tot, nb = 0.0, 0
        for x, pi, z in buffer.batches(batch_size, rng):
            outs, cache = net.forward(x, "train")
            lv, gv = value_loss(z[:, None], outs["v"])
            lp, gp = tree_policy_loss(pi, outs["p"])
            grads, _ = net.backward(cache, {"v": gv, "p": gp})
            adam_step(params, grads, state, net)
            tot += lv + lp
            nb += 1
        curve.append(tot / max(nb, 1))
    return curve


@dataclass
class CycleReport:
    accepted: bool
    incumbent_reward: float
    candidate_reward: float
    loss_curve: list


def train_cycle(net: Mlp, env: Environment, cfg: AlphaZeroConfig, buffer: ReplayBuffer, val_paths,
                rng: np.random.Generator, incumbent_reward: float | None = None, search_cfg: SearchConfig | None = None,
                evaluator_factory=None, episode_paths=None, sampler=None, price_feed=None):
    """Self-play into ``buffer``, fit a candidate, keep it only if validation strictly improves."""
    search_cfg = search_cfg or SearchConfig(sims_per_move(cfg.sims, cfg.sims_mode, env.mdp.horizon), cfg.w)
    factory = evaluator_factory or (lambda n: NetworkEvaluator(n, env))
    evaluator = factory(net)
    for e in range(cfg.episodes_per_cycle):
        path = None if episode_paths is None else episode_paths(rng)
        entries, _ = self_play_episode(env, evaluator, search_cfg, rng, path=path, sampler=sampler,
                                       price_feed=price_feed)
        buffer.extend(entries)
    if len(buffer) == 0:
        raise ContractError("replay buffer is empty after self-play")
    if incumbent_reward is None:
        incumbent_reward = validate(net, env, val_paths)
    candidate = net.copy()
    curve = fit_network(candidate, buffer, cfg.epochs, cfg.batch_size, cfg.lr, rng) if cfg.epochs > 0 else []
    cand_reward = validate(candidate, env, val_paths) if cfg.epochs > 0 else incumbent_reward
    accepted = cand_reward > incumbent_reward
    report = CycleReport(accepted, incumbent_reward, cand_reward, curve)
    return (candidate if accepted else net), accepted, report


def sample_paths(market, n: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, horizon + 1))
    for i in range(n):
        x = market.initial_price(rng)
        out[i, 0] = x
        for k in range(horizon):
            x = market.sample_next(k, x, rng)
            out[i, k + 1] = x
    return out


@dataclass
class AlphaZeroRun:
    net: Mlp
    reports: list
    root_action: int
    eval_hits: np.ndarray | None
    eval_loss: float


def train_alphazero(env: Environment, cfg: AlphaZeroConfig, seed: int) -> AlphaZeroRun:
    """Full training loop: ``cfg.cycles`` gated cycles, then evaluation with search."""
    rng = make_rng(seed, 3)
    net = make_network(env, cfg, int(rng.integers(2**63)))
    horizon = env.mdp.horizon
    val_paths = sample_paths(env.market, cfg.validation_paths, horizon, rng)
    buffer = ReplayBuffer(cfg.buffer_capacity(horizon), env.n_features, env.n_actions)
    reports = []
    incumbent = None
    for _ in range(cfg.cycles):
        net, accepted, rep = train_cycle(net, env, cfg, buffer, val_paths, rng, incumbent)
        incumbent = rep.candidate_reward if accepted else rep.incumbent_reward
        reports.append(rep)
    ev = evaluate_with_search(net, env, cfg, sample_paths(env.market, cfg.eval_paths, horizon, rng), rng)
    return AlphaZeroRun(net, reports, *ev)


def evaluate_with_search(net: Mlp, env: Environment, cfg: AlphaZeroConfig, paths, rng, evaluator=None,
                         sampler=None):
    """Visit-argmax play along ``paths``: root action, hits per path (counting tasks), mean loss."""
    evaluator = evaluator or NetworkEvaluator(net, env)
    scfg = SearchConfig(sims_per_move(cfg.sims, cfg.sims_mode, env.mdp.horizon), cfg.w)
    cache: dict = {}

    def choose(s):
        key = env.key(s)
        if key not in cache:
            cache[key] = search(s, env, evaluator, scfg, rng, sampler=sampler).best()
        return cache[key]

    root = env.reset(rng, float(paths[0][0]))
    root_action = choose(root)
    finals = play_paths(env, paths, choose)
    hits = np.array([s.wealth for s in finals]) if env.mdp.counting else None
    loss = float(np.mean([env.terminal_loss(s) for s in finals]))
    return root_action, hits, loss
