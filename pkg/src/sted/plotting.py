"""PNG figures: result grids, disparity colormaps and per-stage BDE magnitudes."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DISPARITY_CMAP = "viridis"


def _to_hwc(img):
    img = np.clip(np.asarray(img, np.float64), 0.0, 1.0)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
    return img


def _show(ax, img, title=None):
    img = _to_hwc(img)
    ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=8)


def _show_disparity(fig, ax, disp):
    disp = np.asarray(disp, np.float64)
    lo, hi = float(disp.min()), float(disp.max())
    im = ax.imshow(disp, cmap=DISPARITY_CMAP, vmin=lo, vmax=hi if hi > lo else lo + 1e-6)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_xlabel(f"min {lo:.2f}  max {hi:.2f}", fontsize=8)
    return im


def save_disparity(disp, path) -> Path:
    """Disparity colormap with its value range written under the image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = _show_disparity(fig, ax, disp)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def save_result_grid(sample, frames, disp, path) -> Path:
    """Rows: blurry input and disparity, deblurred frames, ground-truth frames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    m = frames.shape[0]
    cols = max(m, 2)
    fig, axes = plt.subplots(3, cols, figsize=(1.8 * cols, 5.6), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    axes[0, 0].axis("on")
    _show(axes[0, 0], sample.blurry, "blurry")
    axes[0, 1].axis("on")
    _show_disparity(fig, axes[0, 1], disp)
    axes[0, 1].set_title("disparity", fontsize=8)
    for i in range(m):
        axes[1, i].axis("on")
        _show(axes[1, i], frames[i], f"deblurred {i}")
        axes[2, i].axis("on")
        _show(axes[2, i], sample.gt_frames[i], f"gt {i}")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def save_stage_magnitudes(magnitudes, path) -> int:
    """Mean |bidirectional disparity| per DDFE stage; returns the point count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mags = [float(v) for v in magnitudes]
    fig, ax = plt.subplots(figsize=(4, 3))
    (line,) = ax.plot(range(1, len(mags) + 1), mags, "o-")
    ax.set_xlabel("stage")
    ax.set_ylabel("mean |disparity|")
    ax.set_xticks(range(1, len(mags) + 1))
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return len(line.get_xdata())


def save_loss_curve(history, path, keys=("dblr", "perc", "tv")) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = [h.get("step", i) for i, h in enumerate(history)]
    for k in keys:
        if history and k in history[0]:
            ax.plot(steps, [h[k] for h in history], label=k)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path
