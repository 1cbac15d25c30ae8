"""Static figures written next to reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_metric_curves(report, path) -> Path:
    """Mean F-measure and E-measure over the threshold sweep."""
    n = report.config.n_thresholds
    th = np.arange(n) / n
    f = np.stack([r.f_curve for r in report.per_image])
    e = np.stack([r.e_curve for r in report.per_image])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for ax, curves, label, key in ((axes[0], f, "F-measure", "maxF"), (axes[1], e, "E-measure", "Emax")):
            for c in curves:
                ax.plot(th, c, color="0.8", lw=0.5)
            mean = curves.mean(axis=0)
            k = int(mean.argmax())
            ax.plot(th, mean, color="C0", lw=1.5, label="dataset mean")
            ax.plot(th[k], mean[k], "o", color="C3", ms=4,
                    label=f"{key} = {report.aggregate[key]:.4f}")
            ax.set_xlabel("threshold")
            ax.set_ylabel(label)
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(losses, path, window: int = 100) -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.semilogy(losses, color="0.7", lw=0.6, label="loss")
        if losses.size >= window:
            running = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.semilogy(np.arange(window - 1, losses.size), running, color="C0", lw=1.4,
                        label=f"running mean ({window})")
        ax.set_xlabel("step")
        ax.set_ylabel("denoising loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_timestep_distribution(pmf, path, masses=None) -> Path:
    pmf = np.asarray(pmf)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.4))
        ax.fill_between(np.arange(pmf.size), pmf, step="post", color="C0", alpha=0.6)
        ax.set_xlabel("timestep")
        ax.set_ylabel("probability")
        ax.set_xlim(0, pmf.size)
        if masses is not None:
            ax.set_title("interval masses " + " / ".join(f"{m:.3f}" for m in masses))
        fig.tight_layout()
        return _save(fig, path)


def montage(rows, path, titles=("image", "ground truth", "soft map", "binary")) -> Path:
    """Grid with one row per image: the input followed by one panel per map.

    ``rows`` holds ``(name, image, *maps)`` tuples; a map may be None.
    """
    rows = list(rows)
    n_cols = max(len(r) - 1 for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(rows), n_cols, figsize=(1.6 * n_cols, 1.6 * len(rows)),
                                 squeeze=False)
        for i, (name, *panels) in enumerate(rows):
            for j in range(n_cols):
                ax = axes[i, j]
                ax.set_xticks([])
                ax.set_yticks([])
                for side in ax.spines.values():
                    side.set_visible(False)
                panel = panels[j] if j < len(panels) else None
                if panel is not None:
                    ax.imshow(panel, cmap=None if panel.ndim == 3 else "gray", vmin=0, vmax=1,
                              interpolation="nearest")
                if i == 0 and j < len(titles):
                    ax.set_title(titles[j])
            axes[i, 0].set_ylabel(name, rotation=0, ha="right", va="center")
        fig.tight_layout()
        return _save(fig, path)
