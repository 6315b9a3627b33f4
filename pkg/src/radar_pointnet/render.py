"""Bird's-eye rendering of one radar frame with labels and boxes.

Points are sized by RCS and carry an arrow along the line of sight whose length
is the compensated Doppler velocity. Car points are red, clutter points blue;
the predicted box is solid red and the ground-truth box dashed black.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402

from radar_pointnet.core_types import CAR, OrientedBox2D, RadarFrame  # noqa: E402
from radar_pointnet.geometry import box_corners  # noqa: E402

RCS_RANGE = (-20.0, 20.0)  # dBsm mapped onto the marker radius range
RADIUS_RANGE = (1.0, 6.0)  # points
ARROW_SCALE = 0.5  # metres of arrow per m/s
CAR_COLOR = "tab:red"
CLUTTER_COLOR = "tab:blue"


def rcs_to_radius(rcs: np.ndarray, rcs_range: Tuple[float, float] = RCS_RANGE,
                  radius_range: Tuple[float, float] = RADIUS_RANGE) -> np.ndarray:
    """Affine map from dBsm to marker radius, clamped to ``radius_range``."""
    lo, hi = rcs_range
    r0, r1 = radius_range
    t = np.clip((np.asarray(rcs, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return r0 + t * (r1 - r0)


def doppler_arrows(targets: np.ndarray, scale: float = ARROW_SCALE) -> np.ndarray:
    """Arrow vectors along the radial direction, length ``scale * v_r``; rows with v_r = 0 are omitted.

    Returns an array of ``(x, y, dx, dy)`` rows.
    """
    t = np.asarray(targets, dtype=float).reshape(-1, 4)
    keep = t[:, 2] != 0.0
    t = t[keep]
    rng = np.hypot(t[:, 0], t[:, 1])
    u = t[:, :2] / rng[:, None]
    d = u * (scale * t[:, 2])[:, None]
    return np.column_stack([t[:, 0], t[:, 1], d])


def _to_plot(xy: np.ndarray) -> np.ndarray:
    # lateral axis to the right, longitudinal axis up
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    return np.column_stack([-xy[:, 1], xy[:, 0]])


def _draw_box(ax, box: OrientedBox2D, **style) -> None:
    c = _to_plot(box_corners(box))
    c = np.vstack([c, c[:1]])
    ax.plot(c[:, 0], c[:, 1], **style)


def render_frame(frame: RadarFrame, path: Union[str, Path],
                 predicted_box: Optional[OrientedBox2D] = None,
                 labels: Optional[np.ndarray] = None, dpi: int = 100,
                 size: Tuple[float, float] = (6.0, 6.0)) -> Path:
    """Write a PNG of ``frame``; ``labels`` override the frame's point labels for coloring.

    Output bytes are deterministic for a fixed input and matplotlib version.
    """
    path = Path(path)
    targets = frame.target_array()
    if labels is None:
        labels = np.asarray(frame.point_labels if frame.point_labels is not None
                            else np.zeros(len(targets), dtype=int))
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=size, dpi=dpi)
    try:
        if len(targets):
            xy = _to_plot(targets[:, :2])
            colors = np.where(labels == CAR, CAR_COLOR, CLUTTER_COLOR)
            ax.scatter(xy[:, 0], xy[:, 1], s=rcs_to_radius(targets[:, 3]) ** 2, c=list(colors),
                       linewidths=0, zorder=3)
            arrows = doppler_arrows(targets)
            if len(arrows):
                start = _to_plot(arrows[:, :2])
                delta = _to_plot(arrows[:, 2:])
                ax.quiver(start[:, 0], start[:, 1], delta[:, 0], delta[:, 1], angles="xy",
                          scale_units="xy", scale=1.0, width=0.003, color="0.3", zorder=2)
        if frame.gt_box is not None:
            _draw_box(ax, frame.gt_box, color="black", linestyle="--", linewidth=1.2)
        if predicted_box is not None:
            _draw_box(ax, predicted_box, color=CAR_COLOR, linewidth=1.5)
        handles = [
            Line2D([], [], marker="o", linestyle="", color=CAR_COLOR, label="car target"),
            Line2D([], [], marker="o", linestyle="", color=CLUTTER_COLOR, label="clutter target"),
            Line2D([], [], marker="o", linestyle="", color="0.5", markersize=3,
                   label="marker size: RCS"),
            Line2D([], [], marker=r"$\rightarrow$", linestyle="", color="0.3", markersize=10,
                   label="arrow length: Doppler velocity"),
            Line2D([], [], color=CAR_COLOR, label="predicted box"),
            Line2D([], [], color="black", linestyle="--", label="ground-truth box"),
        ]
        ax.legend(handles=handles, loc="upper right", fontsize=7)
        ax.set_aspect("equal")
        ax.set_xlabel("lateral y [m] (right positive)")
        ax.set_ylabel("longitudinal x [m]")
        ax.set_title(f"{frame.maneuver_id} frame {frame.frame_id}")
        ax.grid(True, linewidth=0.3)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="png", metadata={"Software": None})
    finally:
        plt.close(fig)
    return path
