"""Independent reference computations used only by the tests."""

from __future__ import annotations

import numpy as np


def expectimax_q(mdp, market, k, cash, hold, price):
    """Q(s, .) by plain recursive enumeration of actions and market moves.

    Shares no code with the lattice solver: states are plain float tuples and
    values are memoised on exact floats.
    """
    grid = [float(a) for a in mdp.grid]
    lo, hi = mdp.constraints.cash_min, mdp.constraints.cash_max
    memo = {}

    def post(c, h, x, a):
        trade = a - h
        return c - trade * x - float(mdp.cost(trade, x))

    def ok(c):
        return (lo is None or c >= lo - 1e-12) and (hi is None or c <= hi + 1e-12)

    def q_row(k, c, h, x):
        row = []
        for a in grid:
            c2 = post(c, h, x, a)
            if not ok(c2):
                row.append(None)
                continue
            total = 0.0
            for x2, p in market.transitions(k, x):
                total += p * value(k + 1, c2, a, x2)
            row.append(total)
        return row

    def value(k, c, h, x):
        key = (k, c, h, x)
        if key in memo:
            return memo[key]
        if k == mdp.horizon:
            out = float(mdp.utility(mdp.p0 + c + h * x + float(mdp.payoff(x))))
        else:
            row = [q for q in q_row(k, c, h, x) if q is not None]
            out = max(row) if row else -mdp.reward_scale
        memo[key] = out
        return out

    return np.array([np.nan if q is None else q for q in q_row(k, cash, hold, price)])


def sorted_percentile(values, q):
    """Linear interpolation between order statistics, written from the definition."""
    v = sorted(float(x) for x in values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)
