"""Figures written next to the CSV/JSON outputs of ``train`` and ``eval``."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import read_metrics, smoothed  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "axes.titlesize": 9,
    "legend.fontsize": 6,
    "lines.linewidth": 1.0,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _smooth_or_raw(v, window):
    return (np.arange(window, len(v) + 1), smoothed(v, window)) if len(v) >= window else (np.arange(1, len(v) + 1), v)


def plot_metrics(csv_path: str, png_path: str, window: int = 50) -> str:
    columns, rows = read_metrics(csv_path)
    steps = np.array([r["step"] for r in rows])
    term_cols = [c for c in columns[3:] if not c.startswith("eval:")]
    eval_cols = [c for c in columns if c.startswith("eval:")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        obj = np.array([r["objective"] for r in rows])
        axes[0].plot(steps, obj, color="0.75", lw=0.5, label="per step")
        x, y = _smooth_or_raw(obj, window)
        axes[0].plot(x, y, color="C0", label=f"{window}-step mean")
        axes[0].set(title="ELBO", xlabel="step")
        axes[0].legend(frameon=False)
        for i, col in enumerate(term_cols):
            x, y = _smooth_or_raw(np.array([r[col] for r in rows]), window)
            axes[1].plot(x, y, color=f"C{i % 10}", label=col)
        axes[1].set(title="terms (unweighted)", xlabel="step", yscale="symlog")
        axes[1].legend(frameon=False, ncol=1 if len(term_cols) < 10 else 2)
        for i, col in enumerate(eval_cols):
            pts = [(r["step"], r[col]) for r in rows if r[col] is not None]
            if pts:
                s, v = zip(*pts)
                axes[2].plot(s, v, marker=".", color=f"C{i % 10}", label=col[5:])
        axes[2].set(title="held-out cross-modal error", xlabel="step", yscale="log")
        if eval_cols:
            axes[2].legend(frameon=False)
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def plot_cross_modal(report: dict[str, float], png_path: str) -> str:
    """Heat map of error per (source subset, target) pair."""
    pairs = [k.split("->") for k in report]
    sources = list(dict.fromkeys(s for s, _ in pairs))
    targets = sorted({t for _, t in pairs})
    grid = np.full((len(sources), len(targets)), np.nan)
    for (s, t), v in zip(pairs, report.values()):
        grid[sources.index(s), targets.index(t)] = v
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(targets), 0.8 + 0.35 * len(sources)))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(targets)), targets)
        ax.set_yticks(range(len(sources)), sources)
        ax.set(xlabel="target", ylabel="source")
        for i in range(len(sources)):
            for j in range(len(targets)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3g}", ha="center", va="center", color="w", fontsize=6)
        fig.colorbar(im, ax=ax)
        fig.savefig(png_path)
        plt.close(fig)
    return png_path
