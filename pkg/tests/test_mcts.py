import math

import numpy as np
import pytest

from hedgezero.dp import solve
from hedgezero.market import DummyMarket, nine_state_chain, two_state_chain
from hedgezero.mcts import (AlphaZeroConfig, DpOracleEvaluator, NetworkEvaluator, ReplayBuffer, RolloutEvaluator,
                            SearchConfig, az_score, evaluate_with_search, make_network, read_trace, search,
                            self_play_episode, sims_per_move, train_cycle, ucb1, validate, write_trace)
from hedgezero.replication import (ConstraintSpec, DeadEndError, Environment, MdpState, ReplicationMdp,
                                   scale_reward)
from hedgezero.rng import make_rng

from conftest import uct_mdp

GRID = tuple(np.round(np.linspace(-1, 1, 21), 10))


def seq_env(n=5):
    return Environment(ReplicationMdp(n, ConstraintSpec(GRID), task="sequence",
                                      targets=tuple(0.5 * (-1) ** k for k in range(n))), DummyMarket())


def test_ucb1_values():
    assert ucb1(0.3, 100, 10, 1.0) == pytest.approx(0.3 + math.sqrt(math.log(100) / 10), abs=1e-12)
    assert ucb1(0.3, 100, 10, 1.0) == pytest.approx(0.9786, abs=1e-4)
    assert ucb1(0.0, 5, 0, 1.0) == math.inf
    means = [0.1, 0.7, 0.4]
    assert int(np.argmax([ucb1(m, 50, n, 0.0) for m, n in zip(means, (30, 3, 17))])) == 1


def test_az_score_values():
    assert az_score(0.37, 0.5, 1, 0, 1.0) == pytest.approx(0.37, abs=1e-12)
    assert az_score(-0.2, 0.0, 1000, 4, 3.0) == pytest.approx(-0.2, abs=1e-12)
    assert az_score(0.5, 0.2, math.exp(4), 3, 1.0) == pytest.approx(0.6, abs=1e-9)


class _Uniform:
    def __init__(self, env):
        self.env = env

    def __call__(self, state, legal, rng):
        p = np.zeros(self.env.n_actions)
        p[legal] = 1.0 / legal.size
        return p, 0.0


def test_bandit_prefers_rewarding_action():
    env = Environment(ReplicationMdp(1, ConstraintSpec((0.0, 0.5)), task="sequence", targets=(0.5,)), DummyMarket())
    res = search(env.reset(make_rng(0)), env, _Uniform(env), SearchConfig(200, 1.0), make_rng(1))
    assert res.visits[1] / res.visits.sum() >= 0.6


def test_single_simulation():
    env = seq_env()
    res = search(env.reset(make_rng(0)), env, _Uniform(env), SearchConfig(1), make_rng(0))
    assert res.visits.sum() == 1 and np.count_nonzero(res.visits) == 1


def _walk(node):
    yield node
    for branch in node.children.values():
        for child in branch.values():
            yield from _walk(child)


@pytest.mark.parametrize("score", ["alphazero", "ucb1", "muzero"])
def test_visit_conservation_and_trace_backup(tmp_path, score):
    env = Environment(uct_mdp(), two_state_chain())
    res = search(env.reset(), env, RolloutEvaluator(env), SearchConfig(300, 1.0, score), make_rng(3), trace=True)
    assert res.visits.sum() == 300
    for node in _walk(res.root):
        if not node.terminal and node.children:
            assert node.n_visits == node.N.sum()
    write_trace(tmp_path / "t.jsonl", res.trace)
    trace = read_trace(tmp_path / "t.jsonl")
    w = np.zeros(env.n_actions)
    n = np.zeros(env.n_actions)
    for rec in trace:
        a = rec["path"][0][0]
        w[a] += rec["backed_up"]
        n[a] += 1
    np.testing.assert_allclose(w, res.root.W, atol=1e-12)
    np.testing.assert_array_equal(n, res.visits)


def test_search_only_visits_feasible_actions():
    chain = nine_state_chain()
    mdp = ReplicationMdp(3, ConstraintSpec(tuple(np.arange(40) * 0.05), 0.0, 8.0), p0=0.0, init_cash=0.8125,
                         init_holdings=1.5)
    env = Environment(mdp, chain)
    res = search(env.reset(), env, RolloutEvaluator(env), SearchConfig(400, 1.0), make_rng(0))
    legal = set(env.legal(env.reset()).tolist())
    assert set(np.flatnonzero(res.visits).tolist()) <= legal
    for node in _walk(res.root):
        if not node.terminal:
            assert set(np.flatnonzero(node.N).tolist()) <= set(node.legal.tolist())


def test_dead_end_root_raises():
    env = Environment(ReplicationMdp(2, ConstraintSpec((0.0, 1.0), 5.0, 6.0)), nine_state_chain())
    with pytest.raises(DeadEndError):
        search(MdpState(0, 0.0, 0.0, 5.0, 0.0), env, _Uniform(env), SearchConfig(5), make_rng(0))


def test_dp_oracle_search_finds_mode(tc_mdp, chain9, tc_table):
    env = Environment(tc_mdp, chain9)
    ev = DpOracleEvaluator(tc_table, env)
    best = [search(env.reset(), env, ev, SearchConfig(25, 1.0), make_rng(s)).best() for s in range(100)]
    assert sum(b == 12 for b in best) >= 95


def test_uct_recovers_dp_argmax_small():
    mdp, chain = uct_mdp(), two_state_chain()
    env = Environment(mdp, chain)
    target = int(np.argmax(solve(mdp, chain).root_q))
    best = [search(env.reset(), env, RolloutEvaluator(env), SearchConfig(2000, 1.0, "ucb1"), make_rng(s)).best()
            for s in range(10)]
    assert all(b == target for b in best)


def test_self_play_entries():
    env = Environment(uct_mdp(), two_state_chain())
    entries, final = self_play_episode(env, RolloutEvaluator(env), SearchConfig(20), make_rng(5))
    assert len(entries) == env.mdp.horizon
    for _, pi, z in entries:
        assert pi.sum() == pytest.approx(1.0)
        pl = final.wealth + env.mdp.payoff(final.price)
        assert z == pytest.approx(scale_reward(float(env.mdp.utility(pl)), env.scale))


def test_replay_buffer_window_and_sampling():
    buf = ReplayBuffer(4, 2, 3)
    for i in range(6):
        buf.add(np.full(2, i), np.ones(3) / 3, float(i))
    assert len(buf) == 4
    assert sorted(buf.z.tolist()) == [2.0, 3.0, 4.0, 5.0]
    x, _, z = buf.sample(4, make_rng(0))
    assert sorted(z.tolist()) == [2.0, 3.0, 4.0, 5.0]


def test_sims_modes():
    assert sims_per_move(25, "per_move", 5) == 25
    assert sims_per_move(25, "per_episode", 5) == 5
    with pytest.raises(ValueError):
        sims_per_move(25, "nope", 5)


def _tiny_cfg(**kw):
    base = dict(hidden=16, layers=2, cycles=1, episodes_per_cycle=4, sims=8, epochs=1, batch_size=8,
                validation_paths=8, eval_paths=8)
    base.update(kw)
    return AlphaZeroConfig(**base)


def test_gating_rejects_without_improvement():
    env = seq_env(3)
    cfg = _tiny_cfg(epochs=0)
    net = make_network(env, cfg, 0)
    buf = ReplayBuffer(cfg.buffer_capacity(3), env.n_features, env.n_actions)
    val = np.zeros((8, 4))
    out, accepted, rep = train_cycle(net, env, cfg, buf, val, make_rng(0))
    assert not accepted and out is net
    cfg = _tiny_cfg(epochs=2)
    out, accepted, rep = train_cycle(net, env, cfg, buf, val, make_rng(1), incumbent_reward=1.0)
    assert not accepted and out is net and rep.incumbent_reward == 1.0


def test_validate_uses_policy_head():
    env = seq_env(3)
    net = make_network(env, _tiny_cfg(), 0)
    net.zero_()
    for name in ("p",):
        net.heads[name]["b"][...] = -5.0
        net.heads[name]["b"][GRID.index(0.5)] = 5.0
    # always 0.5: hits at steps 0 and 2 of the alternating targets
    assert validate(net, env, np.zeros((4, 4))) == pytest.approx(2 * 2 / 3 - 1)


def test_evaluate_with_search_shapes():
    env = seq_env(3)
    cfg = _tiny_cfg()
    net = make_network(env, cfg, 0)
    out = evaluate_with_search(net, env, cfg, np.zeros((5, 4)), make_rng(0))
    assert len(out) >= 2


def test_network_evaluator_masks_priors():
    chain = nine_state_chain()
    mdp = ReplicationMdp(3, ConstraintSpec(tuple(np.arange(40) * 0.05), 0.0, 8.0), init_cash=0.8125,
                         init_holdings=1.5)
    env = Environment(mdp, chain)
    net = make_network(env, _tiny_cfg(), 0)
    s = env.reset()
    legal = env.legal(s)
    prior, v = NetworkEvaluator(net, env)(s, legal)
    assert prior.sum() == pytest.approx(1.0)
    assert np.all(prior[np.setdiff1d(np.arange(40), legal)] == 0)
    assert -1 <= v <= 1
