"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def training_curves(rows, path):
    """Loss (log scale) and train PSNR against iteration."""
    if not rows:
        return None
    it = np.array([r["iteration"] for r in rows])
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
        for key, label in (("loss_total", "total"), ("loss_rgb", "rgb"), ("loss_depth", "depth")):
            vals = np.array([r[key] for r in rows], dtype=float)
            ax0.plot(it, np.maximum(vals, 1e-12), label=label)
        ax0.set_yscale("log")
        ax0.set_xlabel("iteration")
        ax0.set_ylabel("loss")
        ax0.legend(frameon=False)
        ax1.plot(it, [r["train_psnr"] for r in rows], color="k")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("train PSNR (dB)")
        # mark resolution changes
        dims = [r["grid_dims"] for r in rows]
        for i in range(1, len(dims)):
            if dims[i] != dims[i - 1]:
                for ax in (ax0, ax1):
                    ax.axvline(it[i], color="0.8", lw=0.8, zorder=0)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def view_comparison(gt, pred, depth, path, title=None):
    """Ground truth | render | absolute error | rendered depth."""
    gt = np.clip(np.asarray(gt, dtype=float), 0, 1)
    pred = np.clip(np.asarray(pred, dtype=float), 0, 1)
    err = np.abs(gt - pred).mean(axis=-1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        axes[0].imshow(gt)
        axes[0].set_title("ground truth")
        axes[1].imshow(pred)
        axes[1].set_title("render")
        im = axes[2].imshow(err, cmap="magma", vmin=0)
        axes[2].set_title("|error|")
        fig.colorbar(im, ax=axes[2], fraction=0.046)
        im = axes[3].imshow(depth, cmap="viridis")
        axes[3].set_title("depth (NDC ray)")
        fig.colorbar(im, ax=axes[3], fraction=0.046)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
