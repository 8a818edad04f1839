"""Figure rendering for exported metrics (files only, non-interactive)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
WIDTH = 5.0
COLORS = ["#08589e", "#e34a33", "#31a354", "#756bb1", "#636363"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def _floats(rows: Sequence[Mapping], key: str) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    for r in rows:
        v = r.get(key, "")
        if v in ("", None):
            continue
        xs.append(float(r["iteration"]))
        ys.append(float(v))
    return xs, ys


def training_figure(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Three stacked panels: weighted cost, response time and security score per iteration."""
    panels = [("eval_weighted_cost", "weighted cost", True),
              ("eval_response_time_ms", "response time (ms)", False),
              ("eval_security_score", "security score", False)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, sharex=True, figsize=(WIDTH, WIDTH * GOLDEN * 1.8))
        for ax, (key, label, logy) in zip(axes, panels):
            xs, ys = _floats(rows, key)
            ax.plot(xs, ys, marker="o")
            if logy and ys and min(ys) > 0:
                ax.set_yscale("log")
            ax.set_ylabel(label)
        axes[-1].set_xlabel("learner iteration")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def loss_figure(rows: Sequence[Mapping], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH, WIDTH * GOLDEN))
        for key in ("policy_loss", "value_loss", "mean_abs_td"):
            xs, ys = _floats(rows, key)
            ax.plot(xs, ys, label=key.replace("_", " "))
        ax.set_xlabel("learner iteration")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def speedup_figure(rows: Sequence[Mapping], path: str | Path) -> Path:
    workers = [int(r["workers"]) for r in rows]
    sp = [float(r["speedup"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH, WIDTH * GOLDEN))
        ax.plot(workers, workers, ls="--", color=COLORS[-1], label="linear")
        ax.plot(workers, sp, marker="o", label="measured")
        ax.set_xlabel("brokers")
        ax.set_ylabel("speedup")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def comparison_figure(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Mean weighted cost per policy (log scale; penalties span many decades)."""
    names = [r["policy"] for r in rows]
    w = [max(float(r["mean_weighted_cost"]), 1e-9) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH, WIDTH * GOLDEN))
        ax.bar(range(len(names)), w, color=COLORS[: len(names)] or None)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=15)
        ax.set_yscale("log")
        ax.set_ylabel("mean weighted cost")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
