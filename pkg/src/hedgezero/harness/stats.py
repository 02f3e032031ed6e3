"""Aggregates over independent runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..muzero import percentile


@dataclass
class RunStats:
    n: int
    mean: float
    p5: float
    p95: float
    success_fraction: float | None
    histogram: dict  # label -> count
    records: list

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean,
            "p5": self.p5,
            "p95": self.p95,
            "success_fraction": self.success_fraction,
            "histogram": {str(k): v for k, v in self.histogram.items()},
        }


def aggregate(records: list, value_key: str = "eval_mean_loss", success_key: str = "success",
              hist_key: str = "root_action") -> RunStats:
    """Mean and 5th/95th percentiles (linear interpolation), success fraction and a histogram."""
    if not records:
        raise ValueError("nothing to aggregate")
    vals = np.array([float(r[value_key]) for r in records])
    flags = [r.get(success_key) for r in records]
    known = [bool(f) for f in flags if f is not None]
    success = float(np.mean(known)) if known else None
    hist: dict = {}
    for r in records:
        if r.get(hist_key) is not None:
            key = r[hist_key]
            hist[key] = hist.get(key, 0) + 1
    return RunStats(len(records), float(vals.mean()), percentile(vals, 5), percentile(vals, 95), success,
                    dict(sorted(hist.items())), list(records))
