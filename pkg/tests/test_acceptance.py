"""Acceptance criteria, one test each, with a single PASS/FAIL line printed per criterion.

Criteria 1-6 are fast and deterministic. Criteria 7-11 are stochastic and long;
they run only with ``--statistical`` or ``HEDGEZERO_STATISTICAL=1``. Their run
counts and scale can be reduced through ``HEDGEZERO_STAT_CYCLES`` and
``HEDGEZERO_STAT_SCALE`` for exploratory checks (a reduced run does not
establish the criterion).
"""

import math
import os
import time

import numpy as np
import pytest

from hedgezero.deephedge import DhConfig
from hedgezero.dp import modality_scan, q_slice, solve
from hedgezero.harness import get, run
from hedgezero.harness.config import analysis_state, build_dh, build_market, build_mdp, build_muzero
from hedgezero.market import build_reservoir, two_state_chain
from hedgezero.mcts import RolloutEvaluator, SearchConfig, az_score, search, ucb1
from hedgezero.muzero import fit_dynamics, mz_score, sample_efficiency_experiment, scaled_config
from hedgezero.replication import Environment
from hedgezero.rng import make_rng

from conftest import uct_mdp
from gradcheck_cases import (architecture_error, dh_error, dh_instances, paper_architectures, small_case_error,
                             small_cases)
from oracles import expectimax_q
from random_instances import random_instance


def _line(report, n, ok, detail, elapsed=None):
    t = f" [{elapsed:.1f}s]" if elapsed is not None else ""
    report(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}{t}")


@pytest.fixture
def statistical(request, report):
    on = request.config.getoption("--statistical") or os.environ.get("HEDGEZERO_STATISTICAL") == "1"

    def gate(n):
        if not on:
            report(f"criterion {n}: not run (on-demand tier)")
            pytest.skip("on-demand statistical tier")

    return gate


def _stat_cycles(default):
    return int(os.environ.get("HEDGEZERO_STAT_CYCLES", default))


def _stat_scale(default=0.1):
    return float(os.environ.get("HEDGEZERO_STAT_SCALE", default))


# -- property tier -------------------------------------------------------------------------
def test_criterion_1_dp_matches_brute_force(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        mdp, chain = random_instance(1000 + seed)
        root = mdp.initial_state(chain.initial_price())
        ref = expectimax_q(mdp, chain, 0, root.cash, root.holdings, root.price)
        v_ref = np.nanmax(ref) if np.any(~np.isnan(ref)) else -mdp.reward_scale
        worst = max(worst, abs(solve(mdp, chain).root_v - v_ref))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 30
    _line(report, 1, ok, f"50 instances, max |V* - enumeration| = {worst:.2e} (tol 1e-9)", dt)
    assert ok


def test_criterion_2_concavity(report):
    from hedgezero.replication import UtilitySpec

    t0 = time.perf_counter()
    bad = slices = 0
    for seed in range(25):
        mdp, chain = random_instance(2000 + seed, utility=UtilitySpec("exponential", 2.0, 0.5),
                                     costs=("zero", "quadratic"), bounds=False, even_grid=True)
        for lvl in solve(mdp, chain).levels:
            for q in lvl.q:
                slices += 1
                mid = q[:-2] + q[2:] - 2 * q[1:-1]
                if np.any(mid > 1e-9) or modality_scan(q)[0] != 1:
                    bad += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 60
    _line(report, 2, ok, f"25 configs, {slices} Q-slices, {bad} non-concave or multimodal", dt)
    assert ok


def test_criterion_3_counterexamples(report):
    t0 = time.perf_counter()
    found = {}
    for exp_id in ("counterexample_c1", "counterexample_c2", "counterexample_c3_quadratic",
                   "counterexample_c3_nonconvex"):
        cfg = get(exp_id)
        mdp, market = build_mdp(cfg.mdp), build_market(cfg.market)
        found[exp_id] = modality_scan(q_slice(mdp, market, analysis_state(mdp, market, cfg.analysis["q_slice"], "q")))
    dt = time.perf_counter() - t0
    ok = (found["counterexample_c1"][0] == 2 and found["counterexample_c2"][0] == 2
          and found["counterexample_c3_quadratic"][1] >= 2 and found["counterexample_c3_nonconvex"][1] >= 2
          and dt < 60)
    detail = ", ".join(f"{k.replace('counterexample_', '')}: {v[0]} maxima/{v[1]} runs" for k, v in found.items())
    _line(report, 3, ok, detail, dt)
    assert ok


def test_criterion_4_gradient_checks(report):
    t0 = time.perf_counter()
    module = 0.0
    for case in small_cases():
        act, norm, kind, size, _, loss = case
        for seed in range(100):
            module = max(module, small_case_error(act, norm, kind, size, loss, seed))
    for _, net, heads in paper_architectures():
        module = max(module, architecture_error(net, heads))
    e2e = max(dh_error(env, paths) for _, env, paths in dh_instances())
    dt = time.perf_counter() - t0
    ok = module < 1e-4 and e2e < 1e-3 and dt < 120
    _line(report, 4, ok, f"module max rel err {module:.1e} (< 1e-4), end-to-end {e2e:.1e} (< 1e-3)", dt)
    assert ok


def test_criterion_5_uct_consistency(report):
    t0 = time.perf_counter()
    mdp, chain = uct_mdp(), two_state_chain()
    env = Environment(mdp, chain)
    target = int(np.argmax(solve(mdp, chain).root_q))
    cfg = SearchConfig(10_000, 1.0, "ucb1")
    hits = sum(search(env.reset(), env, RolloutEvaluator(env), cfg, make_rng(s)).best() == target
               for s in range(100))
    dt = time.perf_counter() - t0
    ok = hits >= 99 and dt < 120
    _line(report, 5, ok, f"plain UCT at 1e4 sims recovers the DP argmax in {hits}/100 seeds (need 99)", dt)
    assert ok


def test_criterion_6_score_formulas(report):
    n_s = math.exp(4)
    w2 = (n_s + 1) / (math.exp(0.75) - 1)
    checks = [
        (ucb1(0.3, 100, 10, 1.0), 0.3 + math.sqrt(math.log(100) / 10)),
        (az_score(0.5, 0.2, n_s, 3, 1.0), 0.6),
        (az_score(0.37, 0.4, 1, 0, 1.0), 0.37),
        (az_score(0.37, 0.0, 50, 2, 1.0), 0.37),
        (mz_score(0.0, 1.0, n_s, 0, 1.25, w2), 4.0),
        (mz_score(0.2, 0.5, 1, 0), 0.2),
        (mz_score(0.2, 0.0, 80, 3), 0.2),
    ]
    worst = max(abs(a - b) for a, b in checks)
    ok = worst <= 1e-9 and ucb1(0.1, 10, 0, 1.0) == math.inf
    _line(report, 6, ok, f"{len(checks) + 1} hand-computed values, max error {worst:.1e}")
    assert ok


# -- statistical tier ----------------------------------------------------------------------
def _agent_run(exp_id, cycles, tmp_path):
    cfg = get(exp_id).with_overrides(scale=_stat_scale(), cycles=cycles, out=tmp_path / exp_id)
    return run(cfg).summary


def test_criterion_7_sequence(report, statistical, tmp_path):
    statistical(7)
    t0 = time.perf_counter()
    n = _stat_cycles(100)
    s = _agent_run("seq5", n, tmp_path)
    az, dh = s["alphazero"]["success_fraction"], s["dh"]["success_fraction"]
    ok = az >= 0.6 and dh <= 0.3
    _line(report, 7, ok, f"{n} runs: AlphaZero all-correct {az:.2f} (>= 0.6), DH {dh:.2f} (<= 0.3)",
          time.perf_counter() - t0)
    assert ok


def test_criterion_8_trinomial_cost(report, statistical, tmp_path):
    statistical(8)
    t0 = time.perf_counter()
    n = _stat_cycles(100)
    s = _agent_run("trinomial_cost", n, tmp_path)
    az, dh = s["alphazero"]["success_fraction"], s["dh"]["success_fraction"]
    ok = az >= 0.9 and dh < 0.5
    _line(report, 8, ok, f"{n} runs: AlphaZero root action 12 in {az:.2f} (>= 0.9), DH {dh:.2f} (< 0.5)",
          time.perf_counter() - t0)
    assert ok


def test_criterion_9_sign(report, statistical, tmp_path):
    statistical(9)
    t0 = time.perf_counter()
    n = _stat_cycles(50)
    s = _agent_run("sign5", n, tmp_path)
    az, dh = s["alphazero"]["success_fraction"], s["dh"]["success_fraction"]
    ok = az >= 0.9 and dh <= 0.1
    _line(report, 9, ok, f"{n} runs: AlphaZero success {az:.2f} (>= 0.9), DH {dh:.2f} (<= 0.1)",
          time.perf_counter() - t0)
    assert ok


def test_criterion_10_sample_efficiency(report, statistical):
    statistical(10)
    t0 = time.perf_counter()
    cfg = get("sample_efficiency")
    market, mdp = build_market(cfg.market), build_mdp(cfg.mdp)
    scale = _stat_scale()
    mz = build_muzero(cfg.agents["muzero"])
    mz = scaled_config(mz, scale, dynamics_epochs=max(1, int(round(mz.dynamics.epochs * scale))))
    reservoir = build_reservoir(market, cfg.analysis["reservoir_paths"], mdp.horizon, seed=0)
    n = _stat_cycles(20)
    res = sample_efficiency_experiment(reservoir, mdp, [10, 50], n, build_dh(cfg.agents["dh"]), mz,
                                       n_eval=cfg.n_eval_paths, seed=0, scale=scale)
    t = res.table
    ok = all(t[("muzero", s)]["mean"] <= t[("dh", s)]["mean"] for s in (10, 50))
    detail = ", ".join(f"size {s}: MuZero {t[('muzero', s)]['mean']:.4g} vs DH {t[('dh', s)]['mean']:.4g}"
                       for s in (10, 50))
    _line(report, 10, ok, f"{n} runs, scale {scale}: {detail}", time.perf_counter() - t0)
    assert ok


def test_criterion_11_dynamics_fidelity(report, statistical):
    statistical(11)
    t0 = time.perf_counter()
    cfg = get("sample_efficiency")
    market, mdp = build_market(cfg.market), build_mdp(cfg.mdp)
    mz = build_muzero(cfg.agents["muzero"])
    reservoir = build_reservoir(market, 50_000, mdp.horizon, seed=0)
    model = fit_dynamics(reservoir, mz.dynamics, mz.tick, mz.floor, seed=0)
    worst = 0.0
    for t, price in sorted(model.covered):
        i = market.index_of(price)
        row = market.transition[i]
        true = np.array([row[i + 1] if i + 1 < row.size else 0.0, row[i], row[i - 1] if i > 0 else 0.0])
        worst = max(worst, 0.5 * float(np.abs(model.probs(t, price) - true).sum()))
    ok = worst <= 0.02
    _line(report, 11, ok, f"{len(model.covered)} covered states, max TV to the true kernel {worst:.4f} (<= 0.02)",
          time.perf_counter() - t0)
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
