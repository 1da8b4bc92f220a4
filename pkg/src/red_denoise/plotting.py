"""Report figures rendered to PNG files.

Figures are built on bare :class:`matplotlib.figure.Figure` objects, so no
pyplot global state or interactive backend is involved and rendering is safe
from worker threads.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linewidth": 0.5,
    "legend.frameon": False,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

# PNG text chunks carry the matplotlib version by default; drop it so reruns match byte for byte
_PNG_META = {"Software": None}


def _figure(width: float = 5.0, height: float | None = None, ncols: int = 1):
    fig = Figure(figsize=(width, height or width * GOLDEN))
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def loss_curve(history, path) -> Path:
    """Total, pixel and weighted perceptual loss per iteration on a log scale."""
    with matplotlib.rc_context(STYLE):
        fig, (ax,) = _figure()
        it = history.column("iteration")
        if len(it):
            ax.plot(it, history.column("total"), label="total", color="k")
            ax.plot(it, history.column("mse"), label="MSE", color="tab:blue", alpha=0.8)
            weighted = history.column("lambda_p") * history.column("perceptual")
            if np.any(weighted > 0):
                ax.plot(it, weighted, label=r"$\lambda$ perceptual", color="tab:orange", alpha=0.8)
            ax.set_yscale("log")
            ax.legend()
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title("training loss")
        return _save(fig, path)


def evaluation_figure(evaluation, path) -> Path:
    """Per-image PSNR and SSIM, denoised against the noisy baseline."""
    ok = [(d, n) for d, n in zip(evaluation.denoised.records, evaluation.noisy.records) if d.ok and n.ok]
    with matplotlib.rc_context(STYLE):
        fig, axes = _figure(width=8.0, height=3.0, ncols=2)
        x = np.arange(len(ok))
        labels = [d.id for d, _ in ok]
        for ax, field, title in ((axes[0], "psnr_db", "PSNR (dB)"), (axes[1], "ssim", "SSIM")):
            ax.bar(x - 0.2, [getattr(n, field) for _, n in ok], 0.4, label="noisy", color="0.7")
            ax.bar(x + 0.2, [getattr(d, field) for d, _ in ok], 0.4, label="denoised", color="tab:blue")
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
            ax.set_title(title)
            finite = [getattr(r, field) for pair in ok for r in pair if math.isfinite(getattr(r, field))]
            if finite:
                lo, hi = min(finite), max(finite)
                pad = 0.1 * (hi - lo) or 0.05 * abs(hi) or 1.0
                ax.set_ylim(lo - pad, hi + pad)
        axes[0].legend()
        return _save(fig, path)


def sweep_figure(rows, baseline, path) -> Path:
    """PSNR and SSIM against depth, with the noisy baseline as a dashed line.

    ``rows`` holds ``(layers, ssim, rmse, psnr, seconds)`` tuples and
    ``baseline`` the noisy means as a mapping with ``ssim`` and ``psnr_db``.
    """
    with matplotlib.rc_context(STYLE):
        fig, axes = _figure(width=7.0, height=2.8, ncols=2)
        layers = [r[0] for r in rows]
        for ax, col, key, title in ((axes[0], 3, "psnr_db", "PSNR (dB)"), (axes[1], 1, "ssim", "SSIM")):
            ax.plot(layers, [r[col] for r in rows], marker="o", color="tab:blue", label="denoised")
            if baseline is not None:
                ax.axhline(baseline[key], ls="--", color="0.5", label="noisy")
            ax.set_xticks(layers)
            ax.set_xlabel("layers")
            ax.set_title(title)
        axes[0].legend()
        return _save(fig, path)


def image_strip(images, titles, path) -> Path:
    """Side-by-side grayscale panels on a shared [0, 1] scale."""
    with matplotlib.rc_context(STYLE):
        fig, axes = _figure(width=2.2 * len(images), height=2.4, ncols=len(images))
        for ax, img, title in zip(axes, images, titles):
            ax.imshow(np.asarray(img).reshape(np.shape(img)[-2:]), cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_title(title)
            ax.set_axis_off()
        return _save(fig, path)
