"""Report figures. Everything renders through Agg straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "mimgen",
}


def _save(fig, path) -> Path:
    path = Path(path)
    # no Software tag, so identical data gives identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(losses, path, smoothed=None, title: str = "training loss", log_scale: bool = True) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.arange(len(losses))
        ax.plot(steps, losses, color="0.75", lw=0.8, label="per step")
        if smoothed is not None:
            ax.plot(steps, smoothed, color="C0", label="smoothed")
            ax.legend()
        if log_scale and np.all(np.asarray(losses) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_bench(report, path) -> Path:
    """Per-image latency against batch size, one bar per batch size."""
    sizes = [r.batch_size for r in report.rows]
    per_image = [r.per_image * 1e3 for r in report.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(sizes))
        ax.bar(x, per_image, color="C1", width=0.6)
        ax.set_xticks(x, [str(s) for s in sizes])
        ax.set_xlabel("batch size")
        ax.set_ylabel("latency per image (ms)")
        ax.set_title(f"generate, T={report.sampler['steps']}, cfg={report.sampler['guidance_scale']}")
        fig.tight_layout()
        return _save(fig, path)


def plot_images(images, path, titles=None, cols: int | None = None) -> Path:
    """Tile RGB images in [0, 1] into a single figure."""
    images = list(images)
    cols = cols or min(len(images), 8)
    rows = (len(images) + cols - 1) // cols
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.4 * rows), squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.axis("off")
            if i < len(images):
                ax.imshow(np.clip(images[i], 0, 1), interpolation="nearest")
                if titles is not None:
                    ax.set_title(titles[i], fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_token_usage(usage, path) -> Path:
    usage = np.asarray(usage)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(np.arange(len(usage)), usage, width=1.0, color="C2")
        ax.set_xlabel("codebook id")
        ax.set_ylabel("count")
        ax.set_title(f"codebook usage ({int((usage > 0).sum())}/{len(usage)} used)")
        fig.tight_layout()
        return _save(fig, path)
