"""Experiment execution: per-run JSON records, CSV tables and SVG figures."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..deephedge import PathSource, PolicyStack, evaluate as dh_evaluate, train as dh_train
from ..dp import modality_scan, q_heatmap, solve, write_heatmap_csv, write_q_slice_csv
from ..market import build_reservoir
from ..mcts import train_alphazero
from ..muzero import sample_efficiency_experiment, scaled_config
from ..replication import Environment
from ..rng import make_rng
from . import plots
from .config import (ExperimentConfig, analysis_state, dump, build_alphazero, build_dh,
                     build_market, build_mdp, build_muzero, parse_grid)
from .stats import aggregate

log = logging.getLogger("hedgezero")

_STREAM = {"dh": 101, "alphazero": 102, "eval": 103, "reservoir": 104, "muzero": 105}


def _seed(cfg: ExperimentConfig, stream: str, i: int = 0) -> int:
    return int(make_rng(cfg.seed, _STREAM[stream], i).integers(2**63))


@dataclass
class RunResult:
    out_dir: Path
    files: list
    summary: dict


class _Writer:
    def __init__(self, out: Path, config_hash: str):
        self.out = out
        self.hash = config_hash
        self.files: list = []

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, float):
        return f"{x:.10g}"
    return x


# -- DP oracle -------------------------------------------------------------------
def _run_dp(cfg, market, mdp, wr: _Writer) -> dict:
    a = cfg.analysis
    grid = mdp.grid
    out = {}
    state = analysis_state(mdp, market, a.get("q_slice", {}), "analysis.q_slice")
    table = solve(mdp, market, root=state)
    q = table.root_q
    n_max, n_comp = modality_scan(q)
    best = int(np.flatnonzero(q >= np.nanmax(q) - 1e-12)[0])
    out["q_slice"] = {
        "state": {"k": state.k, "cash": state.cash, "holdings": state.holdings, "price": state.price},
        "q": [None if np.isnan(v) else float(v) for v in q],
        "local_maxima": n_max,
        "feasible_components": n_comp,
        "argmax_index": best,
        "argmax_action": float(grid[best]),
        "value": float(table.root_v),
    }
    write_q_slice_csv(wr.path("q_slice.csv"), grid, q)
    plots.q_slice_plot(wr.path("q_slice.svg"), grid, q, f"{cfg.id}: Q* at k={state.k}", wr.hash)
    root = mdp.initial_state(market.initial_price(np.random.default_rng(0)))
    if state == root:
        out["root_argmax"] = best
    if "heatmap" in a:
        hm = dict(a["heatmap"])
        cash = parse_grid(hm.pop("cash"), "analysis.heatmap.cash")
        hstate = analysis_state(mdp, market, hm, "analysis.heatmap")
        heat = q_heatmap(mdp, market, hstate, cash)
        write_heatmap_csv(wr.path("heatmap.csv"), heat)
        plots.heatmap_plot(wr.path("heatmap.svg"), grid, cash, heat, f"{cfg.id}: Q* by cash and action", wr.hash)
        out["heatmap"] = {"cash": [float(c) for c in cash], "infeasible_cells": int(np.isnan(heat).sum())}
    wr.json("dp.json", {"config_hash": wr.hash, **out})
    return out


# -- learning agents ------------------------------------------------------------------
def _record(agent, cycle, seed, wr, **fields) -> dict:
    rec = {"agent": agent, "cycle": cycle, "seed": seed, "config_hash": wr.hash}
    for k, v in fields.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.integer,)):
            v = int(v)
        elif isinstance(v, (np.floating,)):
            v = float(v)
        rec[k] = v
    return rec


def _success(mdp, n_correct, root_action, dp_best):
    if mdp.counting:
        return bool(n_correct == mdp.horizon)
    if dp_best is None:
        return None
    return bool(root_action == dp_best)


def _run_dh(cfg, market, mdp, env, wr, dp_best) -> list:
    dcfg = build_dh(cfg.agents["dh"])
    eval_paths = build_reservoir(market, cfg.n_eval_paths, mdp.horizon, _seed(cfg, "eval")).paths
    source = PathSource(market=market, horizon=mdp.horizon)
    records = []
    for i in range(cfg.n_cycles):
        s = _seed(cfg, "dh", i)
        stack = PolicyStack(env, dcfg, seed=s)
        _, curve = dh_train(stack, source, dcfg, seed=s, scale=cfg.scale)
        ev = dh_evaluate(stack, eval_paths)
        n_correct = int(np.median(ev.hits)) if ev.hits is not None else None
        rec = _record("dh", i, s, wr, loss_curve=curve, histogram=ev.histogram, root_action=ev.modal_action,
                      eval_mean_loss=ev.mean_loss, n_correct=n_correct,
                      all_correct_rate=ev.success_rate,
                      success=_success(mdp, n_correct, ev.modal_action, dp_best))
        wr.json(f"runs/dh_{i:03d}.json", rec)
        records.append(rec)
        log.info("dh cycle %d: root action %d, loss %.4g", i, rec["root_action"], rec["eval_mean_loss"])
    return records


def _run_alphazero(cfg, market, mdp, env, wr, dp_best) -> list:
    acfg = build_alphazero(cfg.agents["alphazero"]).scaled(cfg.scale)
    records = []
    for i in range(cfg.n_cycles):
        s = _seed(cfg, "alphazero", i)
        run = train_alphazero(env, acfg, s)
        n_correct = int(np.median(run.eval_hits)) if run.eval_hits is not None else None
        rec = _record("alphazero", i, s, wr, root_action=run.root_action, eval_mean_loss=run.eval_loss,
                      n_correct=n_correct,
                      accepted=[r.accepted for r in run.reports],
                      validation=[r.candidate_reward for r in run.reports],
                      loss_curve=[c for r in run.reports for c in r.loss_curve],
                      success=_success(mdp, n_correct, run.root_action, dp_best))
        wr.json(f"runs/alphazero_{i:03d}.json", rec)
        records.append(rec)
        log.info("alphazero cycle %d: root action %d, loss %.4g", i, rec["root_action"], rec["eval_mean_loss"])
    return records


def _run_sample_efficiency(cfg, market, mdp, wr) -> dict:
    a = cfg.analysis
    mz = build_muzero(cfg.agents["muzero"])
    mz = scaled_config(mz, cfg.scale, dynamics_epochs=max(1, int(round(mz.dynamics.epochs * cfg.scale))))
    dcfg = build_dh(cfg.agents["dh"]) if "dh" in cfg.agents else None
    agents = ("dh", "muzero") if dcfg is not None else ("muzero",)
    reservoir = build_reservoir(market, int(a.get("reservoir_paths", 50_000)), mdp.horizon, _seed(cfg, "reservoir"))
    res = sample_efficiency_experiment(reservoir, mdp, [int(s) for s in a["sizes"]], cfg.n_cycles, dcfg, mz,
                                       n_eval=cfg.n_eval_paths, seed=_seed(cfg, "muzero"), scale=cfg.scale,
                                       agents=agents)
    with open(wr.path("sample_efficiency.csv"), "w") as fh:
        fh.write(res.to_csv())
    with open(wr.path("sample_efficiency_aggregate.csv"), "w") as fh:
        fh.write(res.aggregate_csv())
    plots.band_plot(wr.path("sample_efficiency.svg"), res.table, f"{cfg.id}: eval terminal loss", wr.hash)
    for agent, size, run, v in res.rows:
        wr.json(f"runs/{agent}_size{size}_{run:03d}.json",
                {"agent": agent, "reservoir_size": size, "run": run, "eval_mean_loss": v, "config_hash": wr.hash})
    return {f"{agent}@{size}": st for (agent, size), st in res.table.items()}


# -- entry point -----------------------------------------------------------------------
def _open(cfg: ExperimentConfig) -> _Writer:
    out = Path(cfg.output_dir or Path("results") / cfg.id)
    out.mkdir(parents=True, exist_ok=True)
    wr = _Writer(out, cfg.config_hash())
    snapshot = ExperimentConfig(**cfg.to_dict())
    snapshot.output_dir = None  # where results land does not affect them
    with open(wr.path("config.yaml"), "w") as fh:
        fh.write(dump(snapshot))
    return wr


def _close(wr: _Writer, summary: dict) -> RunResult:
    wr.json("summary.json", summary)
    with open(wr.out / "manifest.json", "w") as fh:
        json.dump({"config_hash": wr.hash, "files": sorted(wr.files)}, fh, indent=2)
        fh.write("\n")
    return RunResult(wr.out, sorted(wr.files), summary)


def _root_argmax(mdp, market) -> int:
    q = solve(mdp, market).root_q
    return int(np.flatnonzero(q >= np.nanmax(q) - 1e-12)[0])


def run(cfg: ExperimentConfig, agents=None) -> RunResult:
    """Run every agent block of ``cfg`` (or the subset ``agents``) and write results."""
    market = build_market(cfg.market)
    mdp = build_mdp(cfg.mdp)
    selected = [a for a in cfg.agents if agents is None or a in agents]
    wr = _open(cfg)
    summary: dict = {"id": cfg.id, "config_hash": wr.hash, "seed": cfg.seed, "scale": cfg.scale,
                     "n_cycles": cfg.n_cycles}
    dp_best = None
    if "dp_oracle" in selected:
        dp = _run_dp(cfg, market, mdp, wr)
        summary["dp"] = {k: v for k, v in dp["q_slice"].items() if k != "q"}
        dp_best = dp.get("root_argmax")
    if dp_best is None and "dp_oracle" in cfg.agents and {"dh", "alphazero"} & set(selected):
        dp_best = _root_argmax(mdp, market)
    if dp_best is not None:
        summary["dp_root_argmax"] = dp_best
    if "muzero" in selected:
        summary["sample_efficiency"] = _run_sample_efficiency(cfg, market, mdp, wr)
    else:
        env = Environment(mdp, market)
        all_records = {}
        if "dh" in selected:
            all_records["dh"] = _run_dh(cfg, market, mdp, env, wr, dp_best)
        if "alphazero" in selected:
            all_records["alphazero"] = _run_alphazero(cfg, market, mdp, env, wr, dp_best)
        if all_records:
            _write_agent_tables(cfg, mdp, wr, all_records, summary)
    return _close(wr, summary)


def run_dp(cfg: ExperimentConfig, state: dict | None = None) -> RunResult:
    """Exact Q-slice (and heatmap, when configured) at ``state`` or the configured analysis state."""
    if state is not None:
        cfg = ExperimentConfig(**cfg.to_dict())
        cfg.analysis = dict(cfg.analysis, q_slice=state)
    market = build_market(cfg.market)
    mdp = build_mdp(cfg.mdp)
    wr = _open(cfg)
    dp = _run_dp(cfg, market, mdp, wr)
    summary = {"id": cfg.id, "config_hash": wr.hash, "dp": {k: v for k, v in dp["q_slice"].items() if k != "q"}}
    return _close(wr, summary)


def _write_agent_tables(cfg, mdp, wr, all_records, summary) -> None:
    rows = []
    agg_rows = []
    for agent, recs in all_records.items():
        for r in recs:
            rows.append([agent, r["cycle"], r["seed"], r["root_action"], _fmt(r["n_correct"]), _fmt(r["success"]),
                         _fmt(float(r["eval_mean_loss"]))])
        st = aggregate(recs)
        summary[agent] = st.to_dict()
        agg_rows.append([agent, st.n, _fmt(st.mean), _fmt(st.p5), _fmt(st.p95), _fmt(st.success_fraction)])
    wr.csv("runs.csv", ["agent", "cycle", "seed", "root_action", "n_correct", "success", "eval_mean_loss"], rows)
    wr.csv("aggregate.csv", ["agent", "n", "mean_loss", "p5_loss", "p95_loss", "success_fraction"], agg_rows)
    if mdp.counting:
        labels = list(range(mdp.horizon + 1))
        counts = {a: [sum(1 for r in recs if r["n_correct"] == c) for c in labels] for a, recs in all_records.items()}
        wr.csv("histogram.csv", ["agent"] + [f"correct_{c}" for c in labels],
               [[a] + c for a, c in counts.items()])
        plots.bar_histogram(wr.path("histogram.svg"), counts, labels, "correct actions",
                            f"{cfg.id}: correct actions per run", wr.hash)
    else:
        grid = mdp.grid
        labels = [f"{g:g}" for g in grid]
        counts = {a: [sum(1 for r in recs if r["root_action"] == j) for j in range(grid.size)]
                  for a, recs in all_records.items()}
        wr.csv("histogram.csv", ["agent"] + [f"action_{j}" for j in range(grid.size)],
               [[a] + c for a, c in counts.items()])
        plots.bar_histogram(wr.path("histogram.svg"), counts, labels, "action at t0",
                            f"{cfg.id}: first action per run", wr.hash)
    if "dh" in all_records:
        plots.curve_plot(wr.path("dh_loss.svg"), {f"run {r['cycle']}": r["loss_curve"] for r in all_records["dh"][:10]},
                         f"{cfg.id}: deep hedging training loss", wr.hash)
