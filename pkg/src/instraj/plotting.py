from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trajectories(smoothed, path, ground_truth=None, measured=None) -> None:
    """Top-down plot of smoothed tracks, optionally with ground truth and raw measurements."""
    fig, ax = plt.subplots(figsize=(7, 7), dpi=100)
    for tr in sorted(smoothed, key=lambda s: s.instance_id):
        xy = tr.state.translations[:, :2]
        style = "s" if tr.is_static else "-"
        ax.plot(xy[:, 0], xy[:, 1], style, lw=1.5, label=f"id {tr.instance_id}")
    for m in measured or []:
        xy = np.array([m.poses[t].translation[:2] for t in m.timestamps])
        ax.plot(xy[:, 0], xy[:, 1], ".", ms=3, color="0.5")
    if ground_truth is not None:
        for obj in ground_truth.objects:
            xy = np.array([p.translation[:2] for p in obj.poses])
            ax.plot(xy[:, 0], xy[:, 1], "k--", lw=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if smoothed:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
