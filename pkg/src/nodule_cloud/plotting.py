"""Report figures. Rendering goes through the Agg backend to files only."""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileutil import atomic_write_bytes  # noqa: E402

# keeps PNG bytes stable between runs
_PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
})


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_froc(reports: dict, path, title: str = "FROC"):
    """One curve per report; the seven operating points are marked."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, rep in reports.items():
        curve = np.asarray(rep.curve) if rep.curve else np.zeros((0, 2))
        if len(curve):
            ax.plot(np.maximum(curve[:, 0], 1e-3), curve[:, 1], lw=1.2, alpha=0.6)
        levels = list(rep.fp_levels)
        ax.plot(levels, [rep.sens_at[lv] for lv in levels], "o-", ms=3,
                label=f"{label} ({rep.mean_sens:.3f})", color=ax.lines[-1].get_color() if len(curve) else None)
    ax.set_xscale("log", base=2)
    ax.set_xlim(0.1, 10)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_cloud(cloud, path, title: str = ""):
    """Three orthogonal projections; mask points red, context blue."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    xyz, m = cloud.xyz, cloud.is_mask
    for ax, (i, j), name in zip(axes, [(0, 1), (0, 2), (1, 2)], ["x-y", "x-z", "y-z"]):
        ax.scatter(xyz[~m, i], xyz[~m, j], s=2, c="tab:blue", alpha=0.5, lw=0)
        ax.scatter(xyz[m, i], xyz[m, j], s=3, c="tab:red", lw=0)
        ax.set_aspect("equal")
        ax.set_title(name, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    _save(fig, path)


def plot_training(logs: dict, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, log in logs.items():
        ax.plot([r["epoch"] for r in log], [r["train_loss"] for r in log], label=label, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.legend(fontsize=8)
    _save(fig, path)
