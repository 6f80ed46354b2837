"""Matplotlib figures for training runs: metric curves and image comparisons."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .assets import ImageBuffer, linear_to_srgb  # noqa: E402


def plot_metrics(metrics, path):
    """Loss (log scale) and held-out PSNR per epoch, side by side.

    Parameters
    ----------
    metrics : list of dict
        Rows as produced by :func:`tetvr.optim.train`.
    path : str or Path
        Output file; the format follows the suffix.

    Returns
    -------
    Path
    """
    epochs = [r["epoch"] for r in metrics]
    fig, (ax_l, ax_p) = plt.subplots(1, 2, figsize=(8, 3.2), constrained_layout=True)
    loss = np.array([r["loss"] for r in metrics], dtype=float)
    ok = np.isfinite(loss) & (loss > 0)
    ax_l.plot(np.asarray(epochs)[ok], loss[ok], "o-", color="C0")
    ax_l.set_yscale("log")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_p.plot(epochs, [r["psnr"] for r in metrics], "o-", color="C1")
    ax_p.set_xlabel("epoch")
    ax_p.set_ylabel("held-out PSNR [dB]")
    for ax in (ax_l, ax_p):
        ax.grid(alpha=0.3)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _display(img: ImageBuffer):
    return linear_to_srgb(img.rgb)


def plot_comparison(rendered: ImageBuffer, target: ImageBuffer, path, title=None):
    """Rendered image, target, and absolute error heat map."""
    err = np.abs(rendered.rgb - target.rgb).mean(axis=2)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.3), constrained_layout=True)
    axes[0].imshow(_display(rendered))
    axes[0].set_title("rendered")
    axes[1].imshow(_display(target))
    axes[1].set_title("target")
    im = axes[2].imshow(err, cmap="magma")
    axes[2].set_title("|error|")
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(out_dir, metrics, comparisons=()):
    """Write ``metrics.png`` and one ``compare_<k>.png`` per (rendered, target) pair.

    Returns the list of written files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    if metrics:
        files.append(plot_metrics(metrics, out_dir / "metrics.png"))
    for k, (rendered, target) in enumerate(comparisons):
        files.append(plot_comparison(rendered, target, out_dir / f"compare_{k}.png",
                                     title=f"held-out view {k}"))
    return files
