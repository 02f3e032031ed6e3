"""Exact finite-horizon dynamic programming on the reachable state lattice.

States reachable from the root under any feasible action sequence are
interned per time index by ``(cash // quantum, holdings, price)``. The
backward sweep computes

    Q_k(s, a) = sum_j P(x_j | x) V_{k+1}(s'(s, a, x_j)),   V_k(s) = max_a Q_k(s, a),

with ``V_n`` the terminal utility. Everything is vectorised over states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .market import ContractError
from .replication import MdpState, ReplicationMdp

MAX_STATE_ACTIONS = 10**7


class LatticeSizeError(MemoryError):
    """The reachable lattice exceeds the state-action budget."""


@dataclass
class Level:
    """Interned states at one time index together with their values."""

    k: int
    cash: np.ndarray
    hold: np.ndarray  # index into QTable.hold_values
    price: np.ndarray  # index into QTable.prices
    keys: np.ndarray  # sorted encoded keys
    radix: tuple  # (cash_min, n_hold, n_price)
    q: np.ndarray | None = None  # (S, A), nan where infeasible
    v: np.ndarray | None = None
    next_cash: np.ndarray | None = None  # (S, A) post-trade cash
    feasible: np.ndarray | None = None


@dataclass
class QTable:
    mdp: ReplicationMdp
    levels: list
    prices: np.ndarray
    hold_values: np.ndarray
    quantum: float
    kernel: object = None

    @property
    def root_k(self) -> int:
        return self.levels[0].k

    @property
    def root_q(self) -> np.ndarray:
        return self.levels[0].q[0]

    @property
    def root_v(self) -> float:
        return float(self.levels[0].v[0])

    def level(self, k: int) -> Level:
        return self.levels[k - self.root_k]

    def locate(self, state: MdpState) -> tuple[Level, int]:
        lvl = self.level(state.k)
        h = _hold_index(self.hold_values, state.holdings)
        p = _price_index(self.prices, state.price)
        key = _encode(np.array([_quantize(state.cash, self.quantum)]), np.array([h]), np.array([p]), lvl.radix)
        i = int(np.searchsorted(lvl.keys, key[0]))
        if i >= lvl.keys.size or lvl.keys[i] != key[0]:
            raise KeyError(f"state {state} is not on the lattice")
        return lvl, i

    def q(self, state: MdpState) -> np.ndarray:
        lvl, i = self.locate(state)
        return lvl.q[i]

    def v(self, state: MdpState) -> float:
        lvl, i = self.locate(state)
        return float(lvl.v[i])

    def state(self, k: int, i: int) -> MdpState:
        lvl = self.level(k)
        cash = float(lvl.cash[i])
        hold = float(self.hold_values[lvl.hold[i]])
        price = float(self.prices[lvl.price[i]])
        return MdpState(k, cash, hold, price, self.mdp.p0 + cash + hold * price)

    def n_state_actions(self) -> int:
        return sum(lvl.cash.size for lvl in self.levels) * self.mdp.n_actions


def _quantize(cash, quantum):
    return np.round(np.asarray(cash, dtype=float) / quantum).astype(np.int64)


def _hold_index(hold_values, h):
    i = int(np.argmin(np.abs(hold_values - h)))
    if abs(hold_values[i] - h) > 1e-9:
        raise KeyError(f"holdings {h} not on the lattice")
    return i


def _price_index(prices, x):
    i = int(np.argmin(np.abs(prices - x)))
    if abs(prices[i] - x) > 1e-9:
        raise KeyError(f"price {x} not on the lattice")
    return i


def _encode(cash_q, hold, price, radix):
    cmin, n_hold, n_price = radix
    return ((cash_q - cmin) * n_hold + hold) * n_price + price


def _make_radix(cash_q, n_hold, n_price, k):
    cmin, cmax = int(cash_q.min()), int(cash_q.max())
    span = (cmax - cmin + 1) * n_hold * n_price
    if span >= 2**62:
        raise LatticeSizeError(f"cash range at step {k} too wide to encode ({cmax - cmin + 1} quanta)")
    return (cmin, n_hold, n_price)


class _Kernel:
    """Transition lists per (k, price index), discovering new prices lazily."""

    def __init__(self, market, root_price):
        self.market = market
        self.prices = [float(root_price)]
        self._lookup = {round(float(root_price), 9): 0}
        self._cache = {}

    def index(self, x):
        key = round(float(x), 9)
        if key not in self._lookup:
            self._lookup[key] = len(self.prices)
            self.prices.append(float(x))
        return self._lookup[key]

    def row(self, k, p):
        if (k, p) not in self._cache:
            trans = [(x, pr) for x, pr in self.market.transitions(k, self.prices[p]) if pr > 0]
            total = sum(pr for _, pr in trans)
            if abs(total - 1.0) > 1e-9:
                raise ContractError(f"transition probabilities sum to {total}")
            nxt = np.array([self.index(x) for x, _ in trans], dtype=np.int64)
            prob = np.array([pr for _, pr in trans])
            self._cache[(k, p)] = (nxt, prob)
        return self._cache[(k, p)]


def _post_trade(mdp, cash, hold_vals, price_vals):
    grid = mdp.grid
    trade = grid[None, :] - hold_vals[:, None]
    nxt = cash[:, None] - trade * price_vals[:, None] - mdp.cost(trade, price_vals[:, None])
    return nxt, mdp.constraints.cash_ok(nxt)


def _build_lattice(mdp, market, root, quantum, budget):
    grid = mdp.grid
    hold_values = grid.copy()
    if np.min(np.abs(grid - root.holdings)) > 1e-9:
        hold_values = np.append(grid, root.holdings)
    n_hold = hold_values.size
    kernel = _Kernel(market, root.price)
    A = grid.size
    n = mdp.horizon

    cash_q = _quantize([root.cash], quantum)
    h0 = np.array([_hold_index(hold_values, root.holdings)])
    p0 = np.array([0])
    levels = []
    total = 0
    lvl_cash, lvl_hold, lvl_price = np.array([root.cash]), h0, p0
    for k in range(root.k, n):
        # The encoding must cover every price seen so far; later prices never appear in earlier levels.
        cq = _quantize(lvl_cash, quantum)
        radix = _make_radix(cq, n_hold, 10**6, k)
        keys = _encode(cq, lvl_hold, lvl_price, radix)
        order = np.argsort(keys, kind="stable")
        lvl = Level(k, lvl_cash[order], lvl_hold[order], lvl_price[order], keys[order], radix)
        total += lvl.cash.size * A
        if total > budget:
            raise LatticeSizeError(
                f"state lattice exceeds {budget:.0e} state-action pairs at step {k}: "
                f"{lvl.cash.size} states (cash dimension has {np.unique(cq).size} distinct values)"
            )
        prices = np.asarray(kernel.prices)
        nxt, ok = _post_trade(mdp, lvl.cash, hold_values[lvl.hold], prices[lvl.price])
        lvl.next_cash, lvl.feasible = nxt, ok
        levels.append(lvl)
        if k == n - 1:
            break
        # children
        s_idx, a_idx = np.nonzero(ok)
        c_cash = nxt[s_idx, a_idx]
        c_price_src = lvl.price[s_idx]
        out_cash, out_hold, out_price = [], [], []
        for p in np.unique(c_price_src):
            sel = c_price_src == p
            nxt_p, _ = kernel.row(k, int(p))
            for j in nxt_p:
                out_cash.append(c_cash[sel])
                out_hold.append(a_idx[sel])
                out_price.append(np.full(int(sel.sum()), j, dtype=np.int64))
        if not out_cash:
            break
        C = np.concatenate(out_cash)
        H = np.concatenate(out_hold).astype(np.int64)
        Pi = np.concatenate(out_price)
        cq = _quantize(C, quantum)
        enc = _encode(cq, H, Pi, _make_radix(cq, n_hold, 10**6, k + 1))
        _, first = np.unique(enc, return_index=True)
        lvl_cash, lvl_hold, lvl_price = C[first], H[first], Pi[first]
    return levels, kernel, hold_values


def _terminal_values(mdp, prices, next_cash, next_price_idx):
    """Raw terminal reward after the last decision for every (state, action)."""
    grid = mdp.grid
    x = prices[next_price_idx]
    pl = mdp.p0 + next_cash + grid[None, :] * x + mdp.payoff(x)
    return mdp.utility(pl)


def _child_values(mdp, table_next, next_cash, quantum, next_price_idx, n_hold):
    """Look up V_{k+1} for every (state, action) moving to price ``next_price_idx``."""
    S, A = next_cash.shape
    cq = _quantize(next_cash, quantum)
    hold = np.broadcast_to(np.arange(A), (S, A))
    keys = _encode(cq, hold, np.full((S, A), next_price_idx), table_next.radix)
    pos = np.searchsorted(table_next.keys, keys)
    pos = np.minimum(pos, table_next.keys.size - 1)
    found = table_next.keys[pos] == keys
    return np.where(found, table_next.v[pos], np.nan), found


def _expectation(mdp, levels, k_pos, kernel, values_fn, quantum, n_hold):
    """Q for one level: expectation of child values over the price kernel."""
    lvl = levels[k_pos]
    S, A = lvl.next_cash.shape
    q = np.full((S, A), np.nan)
    prices = np.asarray(kernel.prices)
    for p in np.unique(lvl.price):
        rows = np.flatnonzero(lvl.price == p)
        nxt_p, prob = kernel.row(lvl.k, int(p))
        terms = np.empty((nxt_p.size, rows.size, A))
        for t, j in enumerate(nxt_p):
            terms[t] = prob[t] * values_fn(lvl, rows, int(j), prices)
        q[rows] = terms.sum(axis=0)
    q[~lvl.feasible] = np.nan
    return q


def solve(mdp: ReplicationMdp, market, root: MdpState | None = None, quantum: float = 1e-6,
          budget: int = MAX_STATE_ACTIONS) -> QTable:
    """Optimal action values on every lattice state reachable from ``root``."""
    if mdp.counting:
        raise ContractError("the DP oracle covers replication tasks only")
    if root is None:
        root = mdp.initial_state(market.initial_price(None))
    if not 0 <= root.k < mdp.horizon:
        raise ContractError("root must be a non-terminal decision state")
    levels, kernel, hold_values = _build_lattice(mdp, market, root, quantum, budget)
    n_hold = hold_values.size
    dead_value = -mdp.reward_scale
    # Cover the last step's kernel rows before freezing the price table.
    for p in np.unique(levels[-1].price):
        kernel.row(levels[-1].k, int(p))
    for pos in range(len(levels) - 1, -1, -1):
        lvl = levels[pos]
        if lvl.k == mdp.horizon - 1:
            def values_fn(lvl, rows, j, prices):
                return _terminal_values(mdp, prices, lvl.next_cash[rows], j)
        elif pos + 1 == len(levels):
            # Every state here is a dead end, so no successor level was built.
            def values_fn(lvl, rows, j, prices):
                return np.full((rows.size, mdp.n_actions), np.nan)
        else:
            nxt_lvl = levels[pos + 1]

            def values_fn(lvl, rows, j, prices, nxt_lvl=nxt_lvl):
                vals, found = _child_values(mdp, nxt_lvl, lvl.next_cash[rows], quantum, j, n_hold)
                missing = ~found & lvl.feasible[rows]
                if np.any(missing):
                    raise AssertionError("lattice child missing; quantum too coarse?")
                return vals
        q = _expectation(mdp, levels, pos, kernel, values_fn, quantum, n_hold)
        lvl.q = q
        with np.errstate(all="ignore"):
            v = np.where(lvl.feasible.any(axis=1), np.nanmax(np.where(lvl.feasible, q, -np.inf), axis=1), dead_value)
        lvl.v = v
    return QTable(mdp, levels, np.asarray(kernel.prices), hold_values, quantum, kernel)


def _argmax_lowest(q_row, tol=1e-12):
    best = np.nanmax(q_row)
    return int(np.flatnonzero(q_row >= best - tol)[0])


class LatticePolicy:
    """Deterministic action map stored per lattice level (``-1`` at dead ends)."""

    def __init__(self, table: QTable, actions: list):
        self.table = table
        self.actions = actions

    def __call__(self, state: MdpState) -> int:
        lvl, i = self.table.locate(state)
        return int(self.actions[lvl.k - self.table.root_k][i])


def greedy_policy(table: QTable, tol: float = 1e-12) -> LatticePolicy:
    """Lowest-index maximiser of Q at every lattice state."""
    acts = []
    for lvl in table.levels:
        a = np.full(lvl.cash.size, -1, dtype=np.int64)
        for i in np.flatnonzero(lvl.feasible.any(axis=1)):
            a[i] = _argmax_lowest(lvl.q[i], tol)
        acts.append(a)
    return LatticePolicy(table, acts)


def policy_value(policy, mdp: ReplicationMdp, market, root: MdpState | None = None,
                 quantum: float = 1e-6) -> QTable:
    """Evaluate a fixed deterministic policy; returns a table whose ``v`` holds V^pi.

    ``policy`` is a :class:`LatticePolicy` or any callable ``MdpState -> action index``.
    """
    table = solve(mdp, market, root, quantum)
    n_hold = table.hold_values.size
    for pos in range(len(table.levels) - 1, -1, -1):
        lvl = table.levels[pos]
        if isinstance(policy, LatticePolicy) and policy.table.levels[pos].keys.size == lvl.keys.size:
            acts = policy.actions[pos]
        else:
            acts = np.array([policy(table.state(lvl.k, i)) if lvl.feasible[i].any() else -1
                             for i in range(lvl.cash.size)], dtype=np.int64)
        live = lvl.feasible.any(axis=1)
        bad = live & ((acts < 0) | (acts >= mdp.n_actions))
        bad[live] |= ~lvl.feasible[np.flatnonzero(live), np.clip(acts[live], 0, mdp.n_actions - 1)]
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ContractError(f"policy picks infeasible action {acts[i]} at {table.state(lvl.k, i)}")
        # Q^pi(s, a) for all a given V^pi of the next level.
        if pos < len(table.levels) - 1:
            nxt = table.levels[pos + 1]

            def values_fn(lvl, rows, j, prices, nxt=nxt):
                vals, _ = _child_values(mdp, nxt, lvl.next_cash[rows], quantum, j, n_hold)
                return vals

            q = _expectation(mdp, table.levels, pos, table.kernel, values_fn, quantum, n_hold)
        else:
            q = lvl.q
        v = np.full(lvl.cash.size, -mdp.reward_scale)
        v[live] = q[np.flatnonzero(live), acts[live]]
        lvl.q = q
        lvl.v = v
    return table


def modality_scan(q_slice, tol: float = 1e-12) -> tuple[int, int]:
    """Count local maxima (flat runs merged) and contiguous feasible runs of a Q-slice.

    Infeasible actions are marked by NaN.
    """
    q = np.asarray(q_slice, dtype=float)
    if q.size == 0:
        raise ValueError("empty slice")
    feasible = ~np.isnan(q)
    n_max = 0
    n_comp = 0
    i = 0
    while i < q.size:
        if not feasible[i]:
            i += 1
            continue
        j = i
        while j < q.size and feasible[j]:
            j += 1
        n_comp += 1
        run = q[i:j]
        # merge plateaus
        merged = [run[0]]
        for x in run[1:]:
            if abs(x - merged[-1]) > tol:
                merged.append(x)
        m = len(merged)
        for t in range(m):
            left = t == 0 or merged[t] > merged[t - 1]
            right = t == m - 1 or merged[t] > merged[t + 1]
            if left and right:
                n_max += 1
        i = j
    return n_max, n_comp


def q_slice(mdp: ReplicationMdp, market, state: MdpState, quantum: float = 1e-6) -> np.ndarray:
    """Q*(state, .) over the full action grid, NaN where infeasible."""
    return solve(mdp, market, root=state, quantum=quantum).root_q


def q_heatmap(mdp: ReplicationMdp, market, state: MdpState, cash_values, quantum: float = 1e-6) -> np.ndarray:
    """Rows of Q*(s, .) for ``state`` with its cash replaced by each of ``cash_values``."""
    rows = []
    for c in cash_values:
        s = MdpState(state.k, float(c), state.holdings, state.price, mdp.p0 + float(c) + state.holdings * state.price)
        rows.append(q_slice(mdp, market, s, quantum))
    return np.array(rows)


def write_q_slice_csv(path, grid, q) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["action", "value", "feasible"])
        for a, v in zip(grid, q):
            w.writerow([f"{a:.6f}", "" if np.isnan(v) else f"{v:.12g}", int(not np.isnan(v))])


def write_heatmap_csv(path, heat) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cash_index", "action_index", "value_or_nan"])
        for i, row in enumerate(heat):
            for j, v in enumerate(row):
                w.writerow([i, j, "nan" if np.isnan(v) else f"{v:.12g}"])
