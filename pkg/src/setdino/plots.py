"""Static SVG figures. Output bytes are reproducible for identical inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "setdino"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def adjacency_svg(matrices, titles, path):
    fig, axes = plt.subplots(1, len(matrices), figsize=(3.2 * len(matrices), 3.4), squeeze=False)
    for ax, m, title in zip(axes[0], matrices, titles):
        ax.imshow(m, cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def pr_curve_svg(curves: dict, path):
    """``curves`` maps a label to ``[(percentile, recall, precision)]``."""
    fig, (ax_r, ax_p) = plt.subplots(1, 2, figsize=(7, 3))
    for label, rows in sorted(curves.items()):
        arr = np.asarray(rows, dtype=float)
        ax_r.plot(arr[:, 0], arr[:, 1], marker="o", ms=3, label=label)
        ax_p.plot(arr[:, 0], arr[:, 2], marker="o", ms=3, label=label)
    ax_r.set_xlabel("top percentile")
    ax_r.set_ylabel("recall")
    ax_p.set_xlabel("top percentile")
    ax_p.set_ylabel("precision")
    ax_r.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def similarity_svg(truth_sims, random_sims, ks, path, title="similarity"):
    fig, ax = plt.subplots(figsize=(4, 3))
    bins = np.linspace(-1, 1, 41)
    ax.hist(random_sims, bins=bins, density=True, alpha=0.6, label="other pairs")
    ax.hist(truth_sims, bins=bins, density=True, alpha=0.6, label="truth pairs")
    ax.set_xlabel("cosine similarity")
    ax.set_title(f"{title} (KS {ks:.3f})", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def pca_sweep_svg(frame, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    for col in ("reproducibility_knn", "map", "batch_knn", "graph_connectivity"):
        ax.plot(frame["n_pcs"], frame[col], marker="o", ms=3, label=col)
    ax.set_xscale("log")
    ax.set_xlabel("principal components")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def history_svg(history, path):
    fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(7, 3))
    steps = [h["step"] for h in history]
    ax_l.plot(steps, [h["loss"] for h in history])
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    ax_c.plot(steps, [h["collapse"] for h in history])
    ax_c.set_xlabel("step")
    ax_c.set_ylabel("collapse indicator")
    fig.tight_layout()
    return _save(fig, path)
