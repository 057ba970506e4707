"""Static figures for training logs, gamma sweeps and per-class AP.

Everything renders through the Agg backend straight to files; the CSV
written next to each figure is the source of truth and the figure is a view.
"""

from __future__ import annotations

import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_CODES, TAIL_CLASSES  # noqa: E402
from .trainkit import TrainLog, smoothed  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "tcs3d",
    "figure.dpi": 100,
}
FIGSIZE = (4.8, 3.2)


def _save(fig, path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".svg":
        fig.savefig(path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(path, metadata={"Software": None} if ext == ".png" else None)
    plt.close(fig)
    return str(path)


def loss_curves(logs: Dict[str, TrainLog], path, window: int = 5) -> str:
    """Raw (faint) and smoothed training loss per run label."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for i, (label, log) in enumerate(logs.items()):
            y = np.asarray(log.losses, dtype=float)
            x = np.arange(1, len(y) + 1)
            color = f"C{i % 10}"
            ax.plot(x, y, color=color, alpha=0.3, lw=0.8)
            s = smoothed(y, window)
            ax.plot(x[len(x) - len(s):], s, color=color, lw=1.5, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def gamma_sweep(rows: Sequence[dict], path, metric: str = "map") -> str:
    """Metric vs gamma for the FBce rows, with the BCE row as a horizontal line."""
    fb = sorted((r for r in rows if r["loss"] == "fbce"), key=lambda r: float(r["gamma"]))
    base = [r for r in rows if r["loss"] == "bce"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        if fb:
            g = [float(r["gamma"]) for r in fb]
            ax.plot(g, [r[metric] for r in fb], "o-", color="C0", label="fbce")
        if base:
            ax.axhline(base[0][metric], color="C3", ls="--", lw=1, label="bce")
        ax.set_xlabel("gamma")
        ax.set_ylabel(metric)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def class_ap_bars(per_class: Dict[str, Sequence[Optional[float]]], path,
                  codes: str = CLASS_CODES) -> str:
    """Grouped bars of AP per class; classes without ground truth are left empty."""
    labels = list(per_class)
    n = len(codes)
    width = 0.8 / max(len(labels), 1)
    x = np.arange(n)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for i, label in enumerate(labels):
            vals = [np.nan if v is None else v for v in per_class[label]]
            ax.bar(x + (i - (len(labels) - 1) / 2) * width, vals, width, label=label)
        ax.axvspan(min(TAIL_CLASSES) - 0.5, n - 0.5, color="0.92", zorder=0)
        ax.set_xticks(x)
        ax.set_xticklabels(list(codes))
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("class")
        ax.set_ylabel("AP")
        ax.legend(frameon=False, ncol=max(len(labels), 1))
        fig.tight_layout()
        return _save(fig, path)


def render_all(out_dir, logs: Optional[Dict[str, TrainLog]] = None,
               sweep_rows: Optional[Sequence[dict]] = None,
               per_class: Optional[Dict[str, Sequence[Optional[float]]]] = None,
               fmt: str = "png") -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if logs:
        written.append(loss_curves(logs, os.path.join(out_dir, f"loss_curves.{fmt}")))
    if sweep_rows:
        written.append(gamma_sweep(sweep_rows, os.path.join(out_dir, f"gamma_sweep.{fmt}")))
    if per_class:
        written.append(class_ap_bars(per_class, os.path.join(out_dir, f"class_ap.{fmt}")))
    return written
