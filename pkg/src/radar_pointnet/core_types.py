"""Domain data model: radar targets, frames, ego state and oriented boxes.

All values are SI: meters, m/s, radians, and dBsm for radar cross section.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

CLUTTER = 0
CAR = 1


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_angle`."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.fmod(theta, 2.0 * np.pi)
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)


@dataclass(frozen=True)
class RadarTarget:
    """One radar reflection in the sensor frame.

    Attributes:
        x: forward position [m]
        y: left position [m]
        v_r: ego-motion compensated Doppler velocity [m/s], positive receding
        rcs: radar cross section [dBsm]
    """

    x: float
    y: float
    v_r: float
    rcs: float

    def __post_init__(self) -> None:
        _require_finite(x=self.x, y=self.y, v_r=self.v_r, rcs=self.rcs)
        if math.hypot(self.x, self.y) <= 0.0:
            raise ValueError("a radar target cannot sit at the sensor origin")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.v_r, self.rcs)


@dataclass(frozen=True)
class OrientedBox2D:
    """Amodal 2D box: center, heading and footprint size."""

    xc: float
    yc: float
    theta: float
    length: float
    width: float

    def __post_init__(self) -> None:
        _require_finite(xc=self.xc, yc=self.yc, theta=self.theta,
                        length=self.length, width=self.width)
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError(
                f"box dimensions must be positive, got length={self.length}, width={self.width}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def center(self) -> Tuple[float, float]:
        return (self.xc, self.yc)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.xc, self.yc, self.theta, self.length, self.width)

    def transformed(self, rotation: float, translation: Sequence[float] = (0.0, 0.0)) -> "OrientedBox2D":
        """Rotate about the origin by ``rotation``, then translate."""
        c, s = math.cos(rotation), math.sin(rotation)
        return OrientedBox2D(
            c * self.xc - s * self.yc + translation[0],
            s * self.xc + c * self.yc + translation[1],
            self.theta + rotation,
            self.length,
            self.width,
        )


def canonicalize_box(box: OrientedBox2D) -> OrientedBox2D:
    """Return the same footprint with ``length >= width``."""
    if box.width <= box.length:
        return box
    return OrientedBox2D(box.xc, box.yc, box.theta + math.pi / 2.0, box.width, box.length)


@dataclass(frozen=True)
class EgoState:
    """Ego motion at the time of a measurement cycle.

    ``sensor_offset`` is the sensor mount position in the vehicle frame; the
    sensor axes are aligned with the vehicle axes.
    """

    vx: float = 0.0
    yaw_rate: float = 0.0
    sensor_offset: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        _require_finite(vx=self.vx, yaw_rate=self.yaw_rate,
                        offset_x=self.sensor_offset[0], offset_y=self.sensor_offset[1])
        object.__setattr__(self, "sensor_offset",
                           (float(self.sensor_offset[0]), float(self.sensor_offset[1])))

    def sensor_velocity(self) -> Tuple[float, float]:
        """Velocity of the sensor mount (vehicle frame), rigid-body kinematics."""
        ox, oy = self.sensor_offset
        return (self.vx - self.yaw_rate * oy, self.yaw_rate * ox)


@dataclass(frozen=True)
class RadarFrame:
    """All targets of one measurement cycle."""

    frame_id: int
    maneuver_id: str
    targets: Tuple[RadarTarget, ...]
    ego: EgoState = field(default_factory=EgoState)
    gt_box: Optional[OrientedBox2D] = None
    point_labels: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.point_labels is not None:
            labels = tuple(int(v) for v in self.point_labels)
            if len(labels) != len(self.targets):
                raise ValueError(
                    f"point_labels has {len(labels)} entries for {len(self.targets)} targets")
            if any(v not in (CAR, CLUTTER) for v in labels):
                raise ValueError("point labels must be 0 (clutter) or 1 (car)")
            object.__setattr__(self, "point_labels", labels)

    def __len__(self) -> int:
        return len(self.targets)

    def target_array(self) -> np.ndarray:
        """Targets as an ``(n, 4)`` array of ``x, y, v_r, rcs``."""
        if not self.targets:
            return np.zeros((0, 4))
        return np.array([t.as_tuple() for t in self.targets], dtype=float)

    @classmethod
    def from_arrays(cls, frame_id: int, maneuver_id: str, targets: np.ndarray,
                    ego: EgoState, gt_box: Optional[OrientedBox2D] = None,
                    point_labels: Optional[Sequence[int]] = None) -> "RadarFrame":
        rows = np.asarray(targets, dtype=float).reshape(-1, 4)
        return cls(
            frame_id=int(frame_id),
            maneuver_id=maneuver_id,
            targets=tuple(RadarTarget(*map(float, row)) for row in rows),
            ego=ego,
            gt_box=gt_box,
            point_labels=None if point_labels is None else tuple(point_labels),
        )
