"""Figures written next to the JSON/text reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Drop the version string so identical runs write identical files.
_SAVE = dict(dpi=120, metadata={"Software": None})


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def _series(values):
    return np.array([np.nan if v is None else v for v in values], dtype=float)


def plot_similarity(profile, path) -> Path:
    """Raw cosines (left) and min-max normalized block similarity (right)."""
    x = np.asarray(profile.layer_origins)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.plot(x, _series(profile.moe), "o-", label="MoE in/out")
    ax0.plot(x, _series(profile.norm_moe), "s-", label="Norm+MoE residual")
    ax0.plot(x, _series(profile.block), "^-", label="block in/out")
    ax0.set_xlabel("layer")
    ax0.set_ylabel("cosine similarity (raw)")
    ax0.legend(fontsize=8, frameon=False)
    ax1.bar(x, _series(profile.normalized(profile.block)), color="0.4")
    ax1.set_xlabel("block")
    ax1.set_ylabel("block similarity (min-max)")
    ax1.set_ylim(0, 1.05)
    return _finish(fig, path)


def plot_importance(importance, path) -> Path:
    mat = importance.matrix()
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * mat.shape[1] + 2), max(3, 0.3 * mat.shape[0] + 1.5)))
    im = ax.imshow(mat, aspect="auto", cmap="viridis")
    ax.set_xlabel("expert")
    ax.set_ylabel("layer")
    ax.set_yticks(range(mat.shape[0]), [str(o) for o in importance.layer_origins])
    fig.colorbar(im, ax=ax, label="mean routing probability")
    return _finish(fig, path)


def plot_cost(reports, path) -> Path:
    names = [r.name for r in reports]
    y = np.arange(len(reports))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 0.4 * len(reports) + 1.5), sharey=True)
    ax0.barh(y, [r.flops_forward / 1e12 for r in reports], color="0.35")
    ax0.set_xlabel("forward TFLOPs")
    ax0.set_yticks(y, names)
    ax0.invert_yaxis()
    ax1.barh(y, [r.weight_gib for r in reports], color="tab:blue")
    ax1.set_xlabel("weight memory (GiB)")
    return _finish(fig, path)


def plot_bench(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r["dropped_blocks"] for r in rows], [r["relative"] for r in rows], "o-")
    ax.set_xlabel("dropped blocks")
    ax.set_ylabel("relative decode time (median)")
    return _finish(fig, path)
