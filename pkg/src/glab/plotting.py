"""Report figures rendered to PNG with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _show(ax, img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[0] == 1:
        ax.imshow(img[0], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    elif img.ndim == 3:
        ax.imshow(img.transpose(1, 2, 0), interpolation="nearest")
    else:
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def image_grid(path, rows, row_titles=None, col_titles=None):
    """``rows`` is a list of equal-length lists of ``[C,H,W]`` images."""
    nr, nc = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(nr, nc, figsize=(1.4 * nc + 0.6, 1.5 * nr), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(nc):
            ax = axes[i][j]
            if j < len(row):
                _show(ax, row[j])
            else:
                ax.axis("off")
            if i == 0 and col_titles:
                ax.set_title(col_titles[j], fontsize=7)
        if row_titles:
            axes[i][0].set_ylabel(row_titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def objective_traces(path, traces):
    """Objective per iteration on a log axis; ``traces`` maps legend label -> values."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, tr in traces.items():
        tr = np.asarray(tr, dtype=np.float64)
        ax.plot(np.arange(len(tr)), np.maximum(tr, 1e-16), lw=0.8, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    if len(traces) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def loss_curve(path, losses):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=2, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def strategy_bars(path, summary, metrics=("ssim", "psnr")):
    """Side-by-side bars of mean metrics per strategy; ``summary`` maps
    strategy -> {metric: value}."""
    names = list(summary)
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.6 * len(metrics), 2.8), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        vals = [summary[n][metric] for n in names]
        ax.bar(names, vals, color="0.4")
        ax.set_title(f"mean {metric}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
