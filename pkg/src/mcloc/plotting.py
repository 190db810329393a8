"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def plot_error_cdf(rot_deg: np.ndarray, pos_m: np.ndarray, n_frames: int, path: str | Path) -> None:
    """Cumulative share of frames (failures count as never reached) vs error."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, label in ((axes[0], pos_m, "position error [m]"), (axes[1], rot_deg, "rotation error [deg]")):
        v = np.sort(np.asarray(vals, dtype=float))
        if len(v):
            ax.step(v, 100.0 * np.arange(1, len(v) + 1) / max(n_frames, 1), where="post")
            ax.set_xscale("log")
        ax.set_xlabel(label)
        ax.set_ylabel("% of frames")
        ax.set_ylim(0, 100)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_trajectories(curves: dict[str, np.ndarray], path: str | Path) -> None:
    """Top-down xy plot of named (n, 3) position tracks."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, xyz in curves.items():
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        ax.plot(xyz[:, 0], xyz[:, 1], label=name, lw=1.2)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.axis("equal")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
