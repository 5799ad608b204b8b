"""PNG figures: calibration heatmaps, per-layer update magnitudes, score vs performance."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def calibration_heatmap(C, path, title=""):
    C = np.asarray(C)
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    im = ax.imshow(C, cmap="viridis", vmin=0.0, vmax=max(float(C.max()), 1e-12))
    ax.set_xlabel("source channel q")
    ax.set_ylabel("target channel p")
    ax.set_title(title, fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def update_magnitudes(rows, path, title=""):
    """``rows``: dicts with arm, layer, kind, affine_delta, stats_delta, kernel_delta (averaged by layer)."""
    panels = (("norm", "affine_delta", "affine |dz|"), ("norm", "stats_delta", "moving stats"),
              ("conv", "kernel_delta", "kernel |dw|"))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, (kind, key, label) in zip(axes, panels):
        series = defaultdict(lambda: defaultdict(list))
        order = []
        for r in rows:
            if r["kind"] != kind:
                continue
            if r["layer"] not in order:
                order.append(r["layer"])
            series[r["arm"]][r["layer"]].append(float(r[key]))
        for arm, by_layer in series.items():
            ax.plot(range(len(order)), [np.mean(by_layer[l]) if by_layer[l] else np.nan for l in order],
                    marker="o", label=arm)
        ax.set_xticks(range(len(order)))
        ax.set_xticklabels(order, rotation=60, fontsize=6)
        ax.set_title(label, fontsize=9)
    axes[0].legend(fontsize=7)
    fig.suptitle(title, fontsize=9)
    _save(fig, path)


def score_vs_performance(points, path, xlabel="AC-Corr", ylabel="test dice"):
    """``points``: (label, score, performance) triples; one colour per label."""
    fig, ax = plt.subplots(figsize=(4, 3.2))
    groups = defaultdict(list)
    for label, x, y in points:
        groups[label].append((x, y))
    for label, xy in groups.items():
        xy = np.asarray(xy, dtype=float)
        ax.scatter(xy[:, 0], xy[:, 1], label=label, s=18)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    _save(fig, path)
