"""Static SVG charts: training loss curves and the baseline/refined/oracle triple."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": "logocap"}


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no loss rows")
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "logocap"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_losses(columns: dict, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = columns["step"]
    for key in columns:
        if key == "step":
            continue
        vals = columns[key]
        if any(v > 0 for v in vals):
            ax.plot(steps, vals, label=key, linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_triple(values: dict, path, metric="mean OKS"):
    """Bar chart of whichever of baseline / refined / oracle are present."""
    names = [k for k in ("baseline", "refined", "oracle") if k in values]
    if not names:
        raise ValueError("nothing to plot")
    fig, ax = plt.subplots(figsize=(4.5, 4))
    heights = [values[k] for k in names]
    bars = ax.bar(names, heights, color=["#8c8c8c", "#3b75af", "#e07b39"][:len(names)])
    for b, v in zip(bars, heights):
        ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    lo = min(heights)
    ax.set_ylim(max(0.0, lo - 0.1), 1.02)
    ax.set_ylabel(metric)
    fig.tight_layout()
    return _save(fig, path)
