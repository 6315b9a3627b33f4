"""2D object detection in single-cycle radar point clouds with PointNets."""

from radar_pointnet.core_types import (
    CAR,
    CLUTTER,
    EgoState,
    OrientedBox2D,
    RadarFrame,
    RadarTarget,
    canonicalize_box,
    normalize_angle,
)

__version__ = "0.1.0"

__all__ = [
    "CAR",
    "CLUTTER",
    "EgoState",
    "OrientedBox2D",
    "RadarFrame",
    "RadarTarget",
    "canonicalize_box",
    "normalize_angle",
]
