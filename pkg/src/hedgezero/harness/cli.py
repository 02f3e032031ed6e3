"""Command line: ``python -m hedgezero {run,list,dp,check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .registry import registry, resolve
from .runner import run, run_dp

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hedgezero", description="Replication-MDP experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("experiment", help="registered id or path to a YAML config")
    r.add_argument("--scale", type=float, help="fraction of full-scale episode counts, in (0, 1]")
    r.add_argument("--cycles", type=int, help="number of independent runs")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default results/<id>)")
    r.add_argument("--agents", help="comma-separated subset of the configured agents")

    sub.add_parser("list", help="list registered experiments")

    d = sub.add_parser("dp", help="export the exact Q-slice (and heatmap) of an experiment")
    d.add_argument("experiment")
    d.add_argument("--state", help="k,cash,holdings,price (default: the configured analysis state)")
    d.add_argument("--out")

    c = sub.add_parser("check", help="validate configs")
    c.add_argument("configs", nargs="*", help="ids or paths (default: every registered experiment)")
    return p


def _parse_state(text: str) -> dict:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError("--state", "expected k,cash,holdings,price")
    try:
        return {"k": int(parts[0]), "cash": float(parts[1]), "holdings": float(parts[2]), "price": float(parts[3])}
    except ValueError:
        raise ConfigError("--state", f"cannot parse {text!r}") from None


def _with(cfg: ExperimentConfig, **over) -> ExperimentConfig:
    from .config import from_dict

    c = cfg.with_overrides(**over)
    return from_dict(c.to_dict())  # revalidate


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.cmd == "list":
            for name in registry():
                print(name)
            return EXIT_OK
        if args.cmd == "check":
            refs = args.configs or registry()
            for ref in refs:
                resolve(ref)
                print(f"{ref}: ok")
            return EXIT_OK
        if args.cmd == "run":
            cfg = _with(resolve(args.experiment), scale=args.scale, cycles=args.cycles, seed=args.seed, out=args.out)
            agents = args.agents.split(",") if args.agents else None
            if agents:
                unknown = sorted(set(agents) - set(cfg.agents))
                if unknown:
                    raise ConfigError("--agents", f"{unknown[0]!r} is not configured for {cfg.id}")
            result = run(cfg, agents=agents)
        else:
            cfg = _with(resolve(args.experiment), out=args.out)
            state = _parse_state(args.state) if args.state else None
            result = run_dp(cfg, state)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result.summary, indent=2, default=str))
    print(f"wrote {len(result.files)} files to {Path(result.out_dir)}")
    return EXIT_OK
