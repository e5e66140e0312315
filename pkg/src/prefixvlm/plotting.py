"""Report figures: training curves, learning-rate trace, ablation comparisons, masks.

Everything renders off-screen (Agg) straight to files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
}


def figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    """Figure with the house style; height defaults to the golden ratio of the width."""
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0 / max(ncols, 1) * 1.4
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width, height), squeeze=False)
    return fig, axes[0]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average that ignores missing (None/NaN) entries."""
    v = np.array([np.nan if x is None else x for x in values], dtype=float)
    if window <= 1 or v.size == 0:
        return v
    out = np.full_like(v, np.nan)
    for i in range(v.size):
        seg = v[max(0, i - window + 1) : i + 1]
        seg = seg[np.isfinite(seg)]
        if seg.size:
            out[i] = seg.mean()
    return out


def plot_training_curves(runs: Mapping[str, Sequence[dict]], path: str | Path, window: int = 25) -> Path:
    """Pair and text losses against step, one line per run."""
    fig, (ax_p, ax_t) = figure(9.0, 3.2, ncols=2)
    for name, recs in runs.items():
        steps = [r["step"] for r in recs]
        for ax, key in ((ax_p, "loss_pair"), (ax_t, "loss_text")):
            y = smooth([r.get(key) for r in recs], window)
            if np.isfinite(y).any():
                ax.plot(steps, y, label=name)
    ax_p.set_title("image-text loss")
    ax_t.set_title("text-only loss")
    for ax in (ax_p, ax_t):
        ax.set_xlabel("step")
        ax.set_ylabel("loss (nats)")
    handles, labels = ax_p.get_legend_handles_labels()
    if not handles:
        handles, labels = ax_t.get_legend_handles_labels()
    if handles:
        ax_t.legend(handles, labels, loc="upper right")
    return _save(fig, path)


def plot_lr(records: Sequence[dict], path: str | Path) -> Path:
    fig, (ax,) = figure(5.0, 2.6)
    ax.plot([r["step"] for r in records], [r["lr"] for r in records], color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.ticklabel_format(axis="y", style="sci", scilimits=(-3, 3))
    return _save(fig, path)


def plot_ablation(report: Mapping[str, Mapping[str, float | None]], metrics: Sequence[str], path: str | Path) -> Path:
    """Grouped horizontal bars: one group per arm, one bar per metric (missing values skipped)."""
    arms = list(report)
    fig, (ax,) = figure(6.5, 0.45 * len(arms) + 1.2)
    h = 0.8 / max(len(metrics), 1)
    y = np.arange(len(arms))
    for j, m in enumerate(metrics):
        vals = [report[a].get(m) for a in arms]
        xs = [np.nan if v is None else 100.0 * v for v in vals]
        ax.barh(y + (j - (len(metrics) - 1) / 2) * h, xs, height=h, label=m)
    ax.set_yticks(y)
    ax.set_yticklabels(arms)
    ax.invert_yaxis()
    ax.set_xlabel("score (%)")
    ax.set_xlim(0, 100)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_mask(mask: np.ndarray, path: str | Path, title: str = "") -> Path:
    fig, (ax,) = figure(3.0, 3.0)
    ax.imshow(np.asarray(mask, float), cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
    ax.set_xlabel("key")
    ax.set_ylabel("query")
    ax.grid(False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def ascii_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask, bool))
