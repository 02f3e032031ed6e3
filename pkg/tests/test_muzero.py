import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hedgezero.market import ContractError, PathReservoir, additive_trinomial, build_reservoir
from hedgezero.mcts import AlphaZeroConfig
from hedgezero.muzero import (DynamicsConfig, KernelGuard, MuZeroConfig, ReservoirFeed, count_transitions,
                              fit_dynamics, mz_score, percentile, policy_head_losses, sample_efficiency_experiment,
                              summarize, train_on_reservoir)
from hedgezero.deephedge import DhConfig
from hedgezero.replication import ConstraintSpec, Environment, PayoffSpec, ReplicationMdp
from hedgezero.rng import make_rng

from oracles import sorted_percentile


def test_mz_score_values():
    assert mz_score(0.4, 0.7, 1, 0) == pytest.approx(0.4, abs=1e-12)
    assert mz_score(-0.1, 0.0, 500, 7) == pytest.approx(-0.1, abs=1e-12)
    n_s = math.exp(4)
    w2 = (n_s + 1) / (math.exp(0.75) - 1)
    assert mz_score(0.0, 1.0, n_s, 0, 1.25, w2) == pytest.approx(4.0, abs=1e-9)


def _chain():
    return additive_trinomial(0.247, 0.253, tick=0.05, start=1.0, floor=0.05, horizon=20)


def test_transition_counts():
    paths = np.array([[1.0, 1.05, 1.05, 1.0], [1.0, 0.95, 1.0, 1.05]])
    c = count_transitions(PathReservoir(paths, 0, "x"), 0.05)
    assert c.counts.sum() == 6
    i = [j for j, (t, p) in enumerate(zip(c.times, c.prices)) if t == 0 and p == 1.0][0]
    np.testing.assert_array_equal(c.counts[i], [1, 0, 1])


SMALL_DYN = DynamicsConfig(hidden=16, layers=2, epochs=150, batch_size=32, lr=1e-2)


def test_dynamics_outputs_simplex_everywhere():
    res = build_reservoir(_chain(), 300, 20, seed=1)
    model = fit_dynamics(res, DynamicsConfig(hidden=16, layers=2, epochs=5, batch_size=32), 0.05, 0.05)
    rng = np.random.default_rng(0)
    p = model.predict(rng.integers(0, 20, 10_000), rng.uniform(-5, 10, 10_000))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_constant_price_reservoir():
    res = PathReservoir(np.ones((50, 6)), 0, "flat")
    model = fit_dynamics(res, SMALL_DYN, 0.05, 0.05)
    assert model.loss_curve[-1] < model.loss_curve[0]
    for t in range(5):
        assert model.is_covered(t, 1.0)
        assert model.probs(t, 1.0)[1] >= 0.95


def test_dynamics_never_queries_true_kernel_and_feed_wraps():
    res = build_reservoir(_chain(), 10, 20, seed=2)
    mdp = ReplicationMdp(20, ConstraintSpec(tuple(np.round(np.linspace(-1, 1, 21), 10))),
                         payoff=PayoffSpec("short_call", 1.0), init_cash=0.02783, reward_scale=0.1)
    cfg = MuZeroConfig(agent=AlphaZeroConfig(hidden=8, layers=1, cycles=2, episodes_per_cycle=6, sims=4, epochs=1,
                                             batch_size=16, validation_paths=10),
                       dynamics=DynamicsConfig(hidden=8, layers=1, epochs=2))
    run = train_on_reservoir(res, mdp, cfg, seed=0)
    assert run.guard.queries == 0
    assert run.feed.wraps >= 1 and run.feed.transitions == 12 * 20
    env = Environment(mdp, KernelGuard(1.0))
    losses = policy_head_losses(run.net, env, res.paths)
    assert losses.shape == (10,) and np.all(np.isfinite(losses))
    assert env.market.queries == 0


def test_kernel_guard_refuses():
    g = KernelGuard(1.0)
    with pytest.raises(ContractError):
        g.sample_next(0, 1.0, make_rng(0))
    assert g.queries == 1


def test_reservoir_feed_reshuffles():
    res = PathReservoir(np.arange(12.0).reshape(3, 4), 0, "x")
    feed = ReservoirFeed(res, make_rng(0))
    seen = [tuple(feed()) for _ in range(6)]
    assert len(set(seen[:3])) == 3 and len(set(seen[3:])) == 3 and feed.wraps == 1


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.floats(0, 100))
@settings(max_examples=100, deadline=None)
def test_percentile_matches_sort_oracle(values, q):
    assert percentile(values, q) == pytest.approx(sorted_percentile(values, q), rel=1e-12, abs=1e-9)


def test_single_run_percentiles_collapse():
    s = summarize([0.37])
    assert s["mean"] == s["p5"] == s["p95"] == 0.37


def test_sample_efficiency_csv_layout():
    res = build_reservoir(_chain(), 60, 20, seed=3)
    mdp = ReplicationMdp(20, ConstraintSpec(tuple(np.round(np.linspace(-1, 1, 21), 10))),
                         payoff=PayoffSpec("short_call", 1.0), init_cash=0.02783, reward_scale=0.1)
    cfg = MuZeroConfig(agent=AlphaZeroConfig(hidden=8, layers=1, cycles=1, episodes_per_cycle=2, sims=2, epochs=1,
                                             batch_size=16, validation_paths=10),
                       dynamics=DynamicsConfig(hidden=8, layers=1, epochs=1))
    out = sample_efficiency_experiment(res, mdp, [5, 10], 2, DhConfig(hidden=4, layers=1, epochs=2, total_games=64),
                                       cfg, n_eval=20, seed=0)
    lines = out.to_csv().strip().splitlines()
    assert lines[0] == "agent,reservoir_size,run,eval_mean_loss" and len(lines) == 1 + 8
    agg = out.aggregate_csv().strip().splitlines()
    assert agg[0] == "agent,reservoir_size,mean,p5,p95" and len(agg) == 1 + 4
