"""SVG figures written straight from matplotlib's SVG backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "hedgezero"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path, config_hash: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": f"config_hash={config_hash}"})
    plt.close(fig)


def bar_histogram(path, counts_by_agent: dict, labels, xlabel: str, title: str, config_hash: str = "") -> None:
    """Side-by-side bars, one group per label."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    n = max(len(counts_by_agent), 1)
    width = 0.8 / n
    x = np.arange(len(labels))
    for i, (agent, counts) in enumerate(counts_by_agent.items()):
        ax.bar(x + (i - (n - 1) / 2) * width, counts, width, label=agent)
    ax.set_xticks(x)
    ax.set_xticklabels([str(lb) for lb in labels], rotation=90 if len(labels) > 12 else 0, fontsize=7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("runs")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path, config_hash)


def q_slice_plot(path, grid, q, title: str, config_hash: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(grid, q, marker="o", ms=3)
    ax.set_xlabel("action")
    ax.set_ylabel("Q*")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path, config_hash)


def heatmap_plot(path, grid, cash_values, heat, title: str, config_hash: str = "") -> None:
    """Infeasible cells (NaN) stay white."""
    fig, ax = plt.subplots(figsize=(6, 4))
    masked = np.ma.masked_invalid(np.asarray(heat, dtype=float))
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("white")
    im = ax.pcolormesh(grid, cash_values, masked, cmap=cmap, shading="nearest")
    fig.colorbar(im, ax=ax, label="Q*")
    ax.set_xlabel("action")
    ax.set_ylabel("cash")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path, config_hash)


def band_plot(path, table: dict, title: str, config_hash: str = "") -> None:
    """Mean with a 5-95 percentile band per agent against reservoir size."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for agent in sorted({a for a, _ in table}):
        sizes = sorted(s for a, s in table if a == agent)
        mean = [table[(agent, s)]["mean"] for s in sizes]
        lo = [table[(agent, s)]["p5"] for s in sizes]
        hi = [table[(agent, s)]["p95"] for s in sizes]
        ax.plot(sizes, mean, marker="o", label=agent)
        ax.fill_between(sizes, lo, hi, alpha=0.2)
    ax.set_xscale("log")
    ax.set_xlabel("reservoir size")
    ax.set_ylabel("terminal loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path, config_hash)


def curve_plot(path, curves: dict, title: str, config_hash: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, c in curves.items():
        ax.plot(np.arange(1, len(c) + 1), c, label=label, lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title(title)
    if len(curves) <= 10:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path, config_hash)
