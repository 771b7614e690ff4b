"""Figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .metrics import RetrievalReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}
matplotlib.rcParams.update(STYLE)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_training_curve(history, path) -> Path:
    """Loss per epoch; eval mAP/nDCG on a twin axis when the log has them."""
    fig = Figure(figsize=(5.0, 3.2))
    ax = fig.add_subplot()
    epochs = [r.epoch for r in history.records]
    ax.plot(epochs, history.losses, color="tab:blue", lw=1.2, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    evals = [r for r in history.records if r.report is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([r.epoch for r in evals], [100 * r.report.map_avg for r in evals],
                 "o-", color="tab:orange", ms=3, lw=1, label="test mAP")
        ax2.plot([r.epoch for r in evals], [100 * r.report.ndcg_avg for r in evals],
                 "s-", color="tab:green", ms=3, lw=1, label="test nDCG")
        ax2.set_ylabel("%")
        ax2.legend(loc="center right")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_similarity(S, C, path) -> Path:
    """Similarity matrix next to the relevance matrix it is scored against."""
    fig = Figure(figsize=(7.0, 3.2))
    for i, (mat, title, cmap) in enumerate([(S, "similarity", "viridis"),
                                            (C, "relevance", "Greys")]):
        ax = fig.add_subplot(1, 2, i + 1)
        im = ax.imshow(np.asarray(mat), cmap=cmap, interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("caption")
        ax.set_ylabel("clip")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_reports(reports: Mapping[str, RetrievalReport], path) -> Path:
    """Grouped bars of V2T / T2V / average mAP and nDCG for each named run."""
    fields = ["map_v2t", "map_t2v", "map_avg", "ndcg_v2t", "ndcg_t2v", "ndcg_avg"]
    names = list(reports)
    x = np.arange(len(fields))
    width = 0.8 / max(len(names), 1)
    fig = Figure(figsize=(6.5, 3.2))
    ax = fig.add_subplot()
    for k, name in enumerate(names):
        vals = [100 * getattr(reports[name], f) for f in fields]
        ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, [f.replace("_", " ") for f in fields])
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right")
    return _save(fig, path)
