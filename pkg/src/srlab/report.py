"""Figure rendering for batch-run artifacts.

Everything draws through the Agg backend straight to files; no window
system is touched.  Figures land next to the delimited exports so a run
directory is self-contained.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import Dataset
from .expr import Expression, evaluate_batch, format_expression
from .search import Candidate, SplitAssignment

#: fitness floor for log-scaled axes; exact hits have fitness 0
_FLOOR = 1e-17

_TRAIN_SHADE = "#9ecae9"
_VALIDATE_SHADE = "#1f4e8c"


def staircase_figure(frontier: Sequence[Candidate], path) -> Path:
    """Fitness against complexity for the archive frontier."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if frontier:
        cx = [c.complexity for c in frontier]
        train = [max(c.train_fitness, _FLOOR) for c in frontier]
        val = [max(c.validation_fitness, _FLOOR) for c in frontier]
        ax.step(cx, val, where="post", color=_VALIDATE_SHADE, lw=1.2,
                label="validation")
        ax.plot(cx, val, "o", color=_VALIDATE_SHADE, ms=4)
        ax.plot(cx, train, "o", color=_TRAIN_SHADE, ms=3, label="training")
        ax.set_yscale("log")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("complexity")
    ax.set_ylabel("fitness")
    ax.set_title("frontier")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def fit_figure(d: Dataset, target: str, model: Expression,
               assignment: SplitAssignment, path) -> Path:
    """The best model drawn over the data.

    With a single independent column the model is drawn as a dense curve
    over it; otherwise predictions are plotted against observations.
    """
    path = Path(path)
    y = d.column(target)
    free = [n for n in d.names if n != target]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if len(free) == 1:
        x = d.column(free[0])
        ax.plot(x[assignment.train], y[assignment.train], "o",
                color=_TRAIN_SHADE, ms=4, label="training")
        ax.plot(x[assignment.validate], y[assignment.validate], "o",
                color=_VALIDATE_SHADE, ms=4, label="validation")
        xs = np.linspace(float(x.min()), float(x.max()), 512)
        ys, ok = evaluate_batch(model, {free[0]: xs})
        ax.plot(xs[ok], ys[ok], "-", color="#c44e52", lw=1.4, label="model")
        ax.set_xlabel(free[0])
        ax.set_ylabel(target)
    else:
        pred, ok = evaluate_batch(model, {n: d.column(n) for n in free})
        ax.plot(y[ok & assignment.train], pred[ok & assignment.train], "o",
                color=_TRAIN_SHADE, ms=4, label="training")
        ax.plot(y[ok & assignment.validate], pred[ok & assignment.validate],
                "o", color=_VALIDATE_SHADE, ms=4, label="validation")
        lo, hi = float(np.min(y)), float(np.max(y))
        ax.plot([lo, hi], [lo, hi], "-", color="#c44e52", lw=1.0)
        ax.set_xlabel(f"observed {target}")
        ax.set_ylabel("predicted")
    ax.legend(loc="best", fontsize=8)
    title = format_expression(model, digits=4)
    if len(title) > 70:
        title = title[:67] + "..."
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def residual_figure(residual_table: Dataset, path) -> Path:
    """Residuals over the first independent column (or the row index)."""
    path = Path(path)
    r = residual_table.column("residual")
    free = [n for n in residual_table.names if n != "residual"]
    x = residual_table.column(free[0]) if free else np.arange(len(r), dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.axhline(0.0, color="#999999", lw=0.8)
    ax.plot(x, r, "o", color=_VALIDATE_SHADE, ms=4)
    ax.set_xlabel(free[0] if free else "row")
    ax.set_ylabel("residual")
    ax.set_title(f"max abs residual {float(np.max(np.abs(r))):.4g}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
