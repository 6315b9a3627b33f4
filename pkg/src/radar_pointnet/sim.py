"""Synthetic radar scenes: maneuver trajectories, reflections, clutter, labels.

Vehicles follow unicycle kinematics (no side slip), so the velocity of any
body point is ``v * heading + yaw_rate x (p - center)``. The ego reference
point is the rear-axle center and the sensor sits at ``sensor_offset`` with
its axes aligned to the vehicle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from radar_pointnet.core_types import (
    CAR,
    CLUTTER,
    EgoState,
    OrientedBox2D,
    RadarFrame,
)
from radar_pointnet.geometry import box_corners, points_in_box

MANEUVER_KINDS = (
    "circle",
    "figure_eight",
    "follow",
    "follow_overtake",
    "approach_head_on",
    "pass_standing_ego",
    "cross_standing_ego",
    "circle_around_ego",
    "lead_in_front",
    "random_drive",
    "static_clutter_only",
)

# Human-readable rows for evaluation reports.
MANEUVER_TITLES = {
    "circle": "target vehicle driving circles",
    "figure_eight": "target vehicle driving figure eights",
    "follow": "ego vehicle driving behind target vehicle",
    "follow_overtake": "vehicles driving behind each other with overtaking",
    "approach_head_on": "target vehicle approaching moving ego vehicle",
    "pass_standing_ego": "target vehicle passing standing ego vehicle",
    "cross_standing_ego": "target vehicle crossing standing ego vehicle",
    "circle_around_ego": "target vehicle circling around standing ego vehicle",
    "lead_in_front": "target vehicle driving away in front of standing ego vehicle",
    "random_drive": "target vehicle driving randomly",
    "static_clutter_only": "no target vehicle",
}

LABEL_GROWTH = 0.35
DEFAULT_SENSOR_OFFSET = (3.7, 0.8)
_INTEGRATION_DT = 0.01


@dataclass(frozen=True)
class ManeuverSpec:
    kind: str
    duration: float = 10.0
    cycle_period: float = 0.5
    seed: int = 0
    instance: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MANEUVER_KINDS:
            raise ValueError(f"unknown maneuver kind {self.kind!r}")
        if not self.duration > 0 or not self.cycle_period > 0:
            raise ValueError("duration and cycle_period must be positive")

    @property
    def maneuver_id(self) -> str:
        return f"{self.kind}-{self.instance:02d}"


@dataclass(frozen=True)
class ReflectionModelParams:
    mean_targets_per_car: float = 8.0
    wheel_doppler_std: float = 0.5
    plate_rcs_bonus: float = 10.0
    body_rcs_mean: float = 5.0
    body_rcs_std: float = 4.0
    clutter_rate: float = 60.0
    clutter_rcs_mean: float = -8.0
    clutter_rcs_std: float = 5.0
    clutter_doppler_std: float = 0.3
    occlusion_leak_prob: float = 0.5
    # site mix: contour, wheel, plate, far side
    site_weights: Tuple[float, float, float, float] = (0.6, 0.2, 0.1, 0.1)
    # share of clutter emitted by compact static structures, the rest is uniform
    clutter_cluster_fraction: float = 0.85
    clutter_cluster_density: float = 2e-4
    clutter_cluster_std: float = 1.5
    min_visible_clusters: int = 2
    car_length: float = 4.6
    car_width: float = 1.8

    def __post_init__(self) -> None:
        nonneg = ("mean_targets_per_car", "wheel_doppler_std", "body_rcs_std", "clutter_rate",
                  "clutter_rcs_std", "clutter_doppler_std", "clutter_cluster_density",
                  "clutter_cluster_std")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("occlusion_leak_prob", "clutter_cluster_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if len(self.site_weights) != 4 or min(self.site_weights) < 0 or sum(self.site_weights) <= 0:
            raise ValueError("site_weights must be four non-negative weights")
        if self.car_length <= 0 or self.car_width <= 0:
            raise ValueError("car dimensions must be positive")


@dataclass(frozen=True)
class SensorModel:
    fov: float = math.radians(60.0)
    max_range: float = 100.0
    range_std: float = 0.15
    azimuth_std: float = math.radians(0.3)
    doppler_std: float = 0.1
    rcs_std: float = 1.0
    # noise is truncated at this many standard deviations
    noise_clip: float = 3.0
    sensor_offset: Tuple[float, float] = DEFAULT_SENSOR_OFFSET

    def noiseless(self) -> "SensorModel":
        return replace(self, range_std=0.0, azimuth_std=0.0, doppler_std=0.0, rcs_std=0.0)


# ---------------------------------------------------------------------------
# kinematics


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    yaw_rate: float

    def point_velocity(self, points: np.ndarray) -> np.ndarray:
        """World velocity of body points ``(n, 2)``."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        rel = pts - np.array([self.x, self.y])
        base = self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])
        return base + self.yaw_rate * np.stack([-rel[:, 1], rel[:, 0]], axis=1)


Profile = Callable[[float, float, float, float], Tuple[float, float]]


def integrate_unicycle(start: Tuple[float, float, float], profile: Profile,
                       times: np.ndarray) -> List[VehicleState]:
    """Integrate a unicycle from ``start=(x, y, heading)``.

    ``profile(t, x, y, heading)`` returns ``(speed, yaw_rate)``; the state is
    advanced with exact constant-twist arcs on a fine internal grid.
    """
    x, y, psi = start
    t = 0.0
    states = []
    for target_t in times:
        while t < target_t - 1e-12:
            dt = min(_INTEGRATION_DT, target_t - t)
            v, w = profile(t, x, y, psi)
            if abs(w) < 1e-9:
                x += v * dt * math.cos(psi)
                y += v * dt * math.sin(psi)
            else:
                x += v / w * (math.sin(psi + w * dt) - math.sin(psi))
                y -= v / w * (math.cos(psi + w * dt) - math.cos(psi))
            psi += w * dt
            t += dt
        v, w = profile(t, x, y, psi)
        states.append(VehicleState(x, y, psi, v, w))
    return states


def _const(v: float, w: float = 0.0) -> Profile:
    return lambda t, x, y, psi: (v, w)


def _build_trajectories(kind: str, rng: np.random.Generator, times: np.ndarray,
                        offset: Tuple[float, float]
                        ) -> Tuple[List[VehicleState], Optional[List[VehicleState]]]:
    """Ego (rear axle) and target (box center) states for one maneuver instance."""
    standing = integrate_unicycle((0.0, 0.0, 0.0), _const(0.0), times)
    sx, sy = offset

    if kind == "static_clutter_only":
        v = rng.uniform(0.0, 6.0) if rng.random() < 0.5 else 0.0
        return integrate_unicycle((0.0, 0.0, 0.0), _const(v), times), None

    if kind == "circle":
        radius = rng.uniform(6.0, 12.0)
        v = rng.uniform(3.0, 7.0)
        sign = rng.choice([-1.0, 1.0])
        cx, cy = sx + rng.uniform(22.0, 40.0), sy + rng.uniform(-8.0, 8.0)
        phase = rng.uniform(-math.pi, math.pi)
        start = (cx + radius * math.cos(phase), cy + radius * math.sin(phase),
                 phase + sign * math.pi / 2)
        return standing, integrate_unicycle(start, _const(v, sign * v / radius), times)

    if kind == "figure_eight":
        radius = rng.uniform(7.0, 11.0)
        v = rng.uniform(3.0, 7.0)
        lap = 2 * math.pi * radius / v
        psi0 = rng.uniform(-math.pi, math.pi)
        x0, y0 = sx + rng.uniform(25.0, 40.0), sy + rng.uniform(-6.0, 6.0)
        t0 = rng.uniform(0.0, 2 * lap)

        def profile(t, x, y, psi):
            leg = int(((t + t0) // lap) % 2)
            return v, (v / radius if leg == 0 else -v / radius)

        return standing, integrate_unicycle((x0, y0, psi0), profile, times)

    if kind == "follow":
        v = rng.uniform(8.0, 15.0)
        gap = rng.uniform(12.0, 30.0)
        lateral = sy + rng.uniform(-1.0, 0.5)
        ego = integrate_unicycle((0.0, 0.0, 0.0), _const(v), times)
        target = integrate_unicycle((sx + gap, lateral, 0.0), _const(v), times)
        return ego, target

    if kind == "follow_overtake":
        v_ego = rng.uniform(12.0, 16.0)
        v_target = v_ego - rng.uniform(2.5, 4.5)
        gap = rng.uniform(18.0, 28.0)
        period = 4.0
        t_start = rng.uniform(0.5, 2.0)
        amp = 3.5 * 2 * math.pi / (v_ego * period ** 2)

        def ego_profile(t, x, y, psi):
            if t_start <= t < t_start + period:
                return v_ego, amp * math.sin(2 * math.pi * (t - t_start) / period)
            return v_ego, 0.0

        ego = integrate_unicycle((0.0, 0.0, 0.0), ego_profile, times)
        target = integrate_unicycle((sx + gap, 0.0, 0.0), _const(v_target), times)
        return ego, target

    if kind == "approach_head_on":
        v_ego = rng.uniform(4.0, 12.0)
        v_target = rng.uniform(4.0, 12.0)
        lateral = rng.uniform(2.5, 5.0) * rng.choice([-1.0, 1.0])
        start_x = rng.uniform(45.0, 80.0)
        ego = integrate_unicycle((0.0, 0.0, 0.0), _const(v_ego), times)
        target = integrate_unicycle((start_x, lateral, math.pi), _const(v_target), times)
        return ego, target

    if kind == "pass_standing_ego":
        v = rng.uniform(4.0, 10.0)
        lateral = sy + rng.uniform(3.0, 8.0) * rng.choice([-1.0, 1.0])
        span = v * times[-1] if len(times) else 0.0
        if rng.random() < 0.5:
            start = (sx + 45.0, lateral, math.pi)
        else:
            start = (sx + 45.0 - span, lateral, 0.0)
        return standing, integrate_unicycle(start, _const(v), times)

    if kind == "cross_standing_ego":
        v = rng.uniform(3.0, 8.0)
        dist = sx + rng.uniform(10.0, 28.0)
        span = v * times[-1] if len(times) else 0.0
        direction = rng.choice([-1.0, 1.0])
        start = (dist, sy - direction * span / 2, direction * math.pi / 2)
        return standing, integrate_unicycle(start, _const(v), times)

    if kind == "circle_around_ego":
        radius = rng.uniform(10.0, 18.0)
        v = rng.uniform(3.0, 6.0)
        sign = rng.choice([-1.0, 1.0])
        cx, cy = 1.4 + rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)
        phase = rng.uniform(-math.pi / 2, math.pi / 2)
        start = (cx + radius * math.cos(phase), cy + radius * math.sin(phase),
                 phase + sign * math.pi / 2)
        return standing, integrate_unicycle(start, _const(v, sign * v / radius), times)

    if kind == "lead_in_front":
        accel = rng.uniform(0.8, 2.0)
        v_max = rng.uniform(6.0, 10.0)
        curve = rng.uniform(-0.05, 0.05)
        start = (sx + rng.uniform(6.0, 12.0), sy + rng.uniform(-2.0, 2.0), rng.uniform(-0.3, 0.3))

        def profile(t, x, y, psi):
            v = min(v_max, 0.5 + accel * t)
            return v, curve

        return standing, integrate_unicycle(start, profile, times)

    if kind == "random_drive":
        v = rng.uniform(3.0, 8.0)
        region = np.array([sx + rng.uniform(20.0, 35.0), sy + rng.uniform(-8.0, 8.0)])
        freqs = rng.uniform(0.05, 0.3, size=3)
        amps = rng.uniform(0.05, 0.25, size=3)
        phases = rng.uniform(0.0, 2 * math.pi, size=3)
        start = (region[0] + rng.uniform(-10, 10), region[1] + rng.uniform(-10, 10),
                 rng.uniform(-math.pi, math.pi))

        def profile(t, x, y, psi):
            w = float(np.sum(amps * np.sin(2 * math.pi * freqs * t + phases)))
            to_region = region - np.array([x, y])
            if np.hypot(*to_region) > 14.0:
                desired = math.atan2(to_region[1], to_region[0])
                err = math.atan2(math.sin(desired - psi), math.cos(desired - psi))
                w += 0.8 * err
            return v, float(np.clip(w, -v / 4.0, v / 4.0))

        return standing, integrate_unicycle(start, profile, times)

    raise ValueError(f"unknown maneuver kind {kind!r}")


# ---------------------------------------------------------------------------
# Doppler


def compensate_doppler(raw_radial: float, target_pos: Sequence[float], ego: EgoState) -> float:
    """Remove the sensor's own motion from a measured radial velocity.

    The raw radial velocity of a point is ``(v_point - v_sensor) . u``; adding
    back ``v_sensor . u`` leaves the point's own radial speed, zero for
    stationary world points.
    """
    px, py = float(target_pos[0]), float(target_pos[1])
    r = math.hypot(px, py)
    if r <= 0.0:
        raise ValueError("cannot compensate Doppler for a target at zero range")
    vsx, vsy = ego.sensor_velocity()
    return raw_radial + (vsx * px + vsy * py) / r


def _to_sensor(points_world: np.ndarray, sensor_pos: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    d = points_world - sensor_pos
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def _rotate(vectors: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([c * vectors[:, 0] - s * vectors[:, 1],
                     s * vectors[:, 0] + c * vectors[:, 1]], axis=1)


# ---------------------------------------------------------------------------
# reflections


@dataclass
class CarReflections:
    """Noise-free car reflections of one cycle plus their provenance."""

    positions: np.ndarray  # sensor frame (n, 2)
    world_positions: np.ndarray
    site: np.ndarray  # 0 contour, 1 wheel, 2 plate, 3 far side
    raw_doppler: np.ndarray
    doppler: np.ndarray  # compensated, before sensor noise
    rcs: np.ndarray


def _in_fov(points: np.ndarray, sensor: SensorModel) -> np.ndarray:
    r = np.hypot(points[:, 0], points[:, 1])
    az = np.arctan2(points[:, 1], points[:, 0])
    return (r > 0.5) & (r <= sensor.max_range) & (np.abs(az) <= sensor.fov)


def _sample_on_edges(rng: np.random.Generator, corners: np.ndarray, edges: Sequence[int],
                     count: int) -> np.ndarray:
    if count == 0 or not edges:
        return np.zeros((0, 2))
    starts = corners[list(edges)]
    ends = corners[[(e + 1) % 4 for e in edges]]
    lengths = np.linalg.norm(ends - starts, axis=1)
    pick = rng.choice(len(edges), size=count, p=lengths / lengths.sum())
    u = rng.random(count)[:, None]
    return starts[pick] + u * (ends[pick] - starts[pick])


def car_reflections(rng: np.random.Generator, car: VehicleState, ego_state: VehicleState,
                    params: ReflectionModelParams, sensor: SensorModel) -> CarReflections:
    """Sample reflection sites on the target vehicle as seen from the sensor."""
    ego = EgoState(ego_state.speed, ego_state.yaw_rate, sensor.sensor_offset)
    sensor_pos = _sensor_world_position(ego_state, sensor.sensor_offset)
    box = OrientedBox2D(car.x, car.y, car.heading, params.car_length, params.car_width)
    corners = box_corners(box)
    # outward normals of edges 0..3 (left, rear, right, front) point away from center
    mids = 0.5 * (corners + np.roll(corners, -1, axis=0))
    center = np.array([car.x, car.y])
    visible = [e for e in range(4)
               if np.dot(mids[e] - center, sensor_pos - mids[e]) > 0.0]
    hidden = [e for e in range(4) if e not in visible]

    empty = CarReflections(*(np.zeros((0, 2)),) * 2, *(np.zeros(0),) * 4)
    center_s = _to_sensor(center[None], sensor_pos, ego_state.heading)
    if not _in_fov(center_s, sensor)[0]:
        return empty
    n = int(rng.poisson(params.mean_targets_per_car))
    n = max(n, 1)
    weights = np.asarray(params.site_weights, dtype=float)
    kinds = rng.choice(4, size=n, p=weights / weights.sum())

    pts = np.zeros((n, 2))
    rcs = rng.normal(params.body_rcs_mean, params.body_rcs_std, size=n)
    c, s = math.cos(car.heading), math.sin(car.heading)
    left_visible = 0 in visible
    front_visible, rear_visible = 3 in visible, 1 in visible
    for i, kind in enumerate(kinds):
        if kind == 3 and (not hidden or rng.random() >= params.occlusion_leak_prob):
            kind = 0
        if kind == 2 and not (front_visible or rear_visible):
            kind = 0
        kinds[i] = kind
        if kind == 0:
            pts[i] = _sample_on_edges(rng, corners, visible, 1)[0]
        elif kind == 3:
            pts[i] = _sample_on_edges(rng, corners, hidden, 1)[0]
        elif kind == 1:
            near_side = 1.0 if left_visible else -1.0
            side = -near_side if rng.random() < params.occlusion_leak_prob * 0.5 else near_side
            along = rng.choice([-1.0, 1.0]) * 0.31 * params.car_length
            across = side * 0.45 * params.car_width
            pts[i] = center + np.array([c * along - s * across, s * along + c * across])
        else:
            if front_visible and rear_visible:
                front = rng.random() < 0.5
            else:
                front = front_visible
            along = (0.5 if front else -0.5) * params.car_length
            pts[i] = center + np.array([c * along, s * along])
            rcs[i] += params.plate_rcs_bonus

    local = _to_sensor(pts, sensor_pos, ego_state.heading)
    keep = _in_fov(local, sensor)
    pts, local, kinds, rcs = pts[keep], local[keep], kinds[keep], rcs[keep]
    if len(pts) == 0:
        return empty

    v_world = car.point_velocity(pts)
    v_sensor_frame = _rotate(v_world, -ego_state.heading)
    u = local / np.linalg.norm(local, axis=1, keepdims=True)
    vs = np.array(ego.sensor_velocity())
    raw = np.sum((v_sensor_frame - vs) * u, axis=1)
    comp = np.array([compensate_doppler(r, p, ego) for r, p in zip(raw, local)])
    return CarReflections(local, pts, kinds, raw, comp, rcs)


def _sensor_world_position(ego_state: VehicleState, offset: Tuple[float, float]) -> np.ndarray:
    c, s = math.cos(ego_state.heading), math.sin(ego_state.heading)
    return np.array([ego_state.x + c * offset[0] - s * offset[1],
                     ego_state.y + s * offset[0] + c * offset[1]])


def _clipped_normal(rng: np.random.Generator, std: float, size: int, clip: float) -> np.ndarray:
    if std == 0.0:
        rng.standard_normal(size)  # keep the stream aligned between noisy and noiseless runs
        return np.zeros(size)
    return std * np.clip(rng.standard_normal(size), -clip, clip)


def apply_sensor_noise(rng: np.random.Generator, positions: np.ndarray, doppler: np.ndarray,
                       rcs: np.ndarray, sensor: SensorModel
                       ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(positions)
    r = np.hypot(positions[:, 0], positions[:, 1])
    az = np.arctan2(positions[:, 1], positions[:, 0])
    r = np.maximum(r + _clipped_normal(rng, sensor.range_std, n, sensor.noise_clip), 0.1)
    az = az + _clipped_normal(rng, sensor.azimuth_std, n, sensor.noise_clip)
    pos = np.stack([r * np.cos(az), r * np.sin(az)], axis=1)
    dop = doppler + _clipped_normal(rng, sensor.doppler_std, n, sensor.noise_clip)
    sig = rcs + _clipped_normal(rng, sensor.rcs_std, n, sensor.noise_clip)
    return pos, dop, sig


# ---------------------------------------------------------------------------
# clutter


def _clutter_structures(rng: np.random.Generator, sensor_positions: np.ndarray,
                        params: ReflectionModelParams, sensor: SensorModel) -> np.ndarray:
    """Static world-fixed clutter structure centers around the sensor path."""
    reach = 0.7 * sensor.max_range
    lo = sensor_positions.min(axis=0) - reach
    hi = sensor_positions.max(axis=0) + reach
    area = float(np.prod(hi - lo))
    count = int(rng.poisson(params.clutter_cluster_density * area))
    return lo + rng.random((count, 2)) * (hi - lo)


def _ensure_structures(rng: np.random.Generator, structures: np.ndarray, sensor_pos: np.ndarray,
                       yaw: float, params: ReflectionModelParams, sensor: SensorModel):
    """Top up world-fixed structures so enough of them are in view; returns world and sensor coords."""
    local = _to_sensor(structures, sensor_pos, yaw) if len(structures) else np.zeros((0, 2))
    missing = params.min_visible_clusters - int(_in_fov(local, sensor).sum()) if len(local) else \
        params.min_visible_clusters
    if missing > 0 and params.clutter_cluster_fraction > 0:
        new_local = _uniform_fov(rng, missing, sensor, 0.7 * sensor.max_range)
        new_world = _rotate(new_local, yaw) + sensor_pos
        structures = np.concatenate([structures.reshape(-1, 2), new_world], axis=0)
        local = np.concatenate([local.reshape(-1, 2), new_local], axis=0)
    return structures, local


def _uniform_fov(rng: np.random.Generator, count: int, sensor: SensorModel,
                 max_range: float) -> np.ndarray:
    r = max_range * np.sqrt(rng.uniform(0.0025, 1.0, size=count))
    az = rng.uniform(-sensor.fov, sensor.fov, size=count)
    return np.stack([r * np.cos(az), r * np.sin(az)], axis=1)


def clutter_points(rng: np.random.Generator, structures_sensor: np.ndarray,
                   params: ReflectionModelParams, sensor: SensorModel) -> np.ndarray:
    """Clutter positions of one cycle in the sensor frame, ``Poisson(clutter_rate)`` of them."""
    n = int(rng.poisson(params.clutter_rate))
    visible = structures_sensor[_in_fov(structures_sensor, sensor)] if len(structures_sensor) else \
        np.zeros((0, 2))
    out = np.zeros((n, 2))
    for i in range(n):
        if len(visible) and rng.random() < params.clutter_cluster_fraction:
            center = visible[rng.integers(len(visible))]
            for _ in range(50):
                p = center + rng.normal(0.0, params.clutter_cluster_std, size=2)
                if _in_fov(p[None], sensor)[0]:
                    break
            else:
                p = _uniform_fov(rng, 1, sensor, sensor.max_range)[0]
        else:
            p = _uniform_fov(rng, 1, sensor, sensor.max_range)[0]
        out[i] = p
    return out


# ---------------------------------------------------------------------------
# labeling and maneuvers


def auto_label(frame: RadarFrame, growth: float = LABEL_GROWTH) -> RadarFrame:
    """Label targets inside the ground-truth box grown by ``growth`` in length and width."""
    if frame.gt_box is None or len(frame) == 0:
        labels = (CLUTTER,) * len(frame)
    else:
        xy = frame.target_array()[:, :2]
        inside = points_in_box(xy, frame.gt_box, growth, growth)
        labels = tuple(CAR if v else CLUTTER for v in inside)
    return replace(frame, point_labels=labels)


def generate_maneuver(spec: ManeuverSpec, params: ReflectionModelParams = ReflectionModelParams(),
                      sensor: SensorModel = SensorModel(), label: bool = True,
                      label_growth: float = LABEL_GROWTH) -> List[RadarFrame]:
    """Simulate one maneuver instance, one :class:`RadarFrame` per radar cycle."""
    if spec.kind not in MANEUVER_KINDS:
        raise ValueError(f"unknown maneuver kind {spec.kind!r}")
    seq = np.random.SeedSequence([spec.seed, MANEUVER_KINDS.index(spec.kind), spec.instance])
    traj_seq, clutter_seq, frame_seq = seq.spawn(3)
    n_frames = max(1, int(math.floor(spec.duration / spec.cycle_period + 1e-9)))
    times = np.arange(n_frames) * spec.cycle_period
    ego_states, target_states = _build_trajectories(
        spec.kind, np.random.default_rng(traj_seq), times, sensor.sensor_offset)

    sensor_world = np.array([_sensor_world_position(e, sensor.sensor_offset) for e in ego_states])
    clutter_rng = np.random.default_rng(clutter_seq)
    structures = _clutter_structures(clutter_rng, sensor_world, params, sensor)

    frames = []
    for k, (ego_state, frame_seed) in enumerate(zip(ego_states, frame_seq.spawn(n_frames))):
        rng = np.random.default_rng(frame_seed)
        ego = EgoState(ego_state.speed, ego_state.yaw_rate, sensor.sensor_offset)
        parts = []
        gt_box = None
        if target_states is not None:
            car = target_states[k]
            refl = car_reflections(rng, car, ego_state, params, sensor)
            pos, dop, sig = apply_sensor_noise(rng, refl.positions, refl.doppler, refl.rcs, sensor)
            wheel = refl.site == 1
            dop = dop + np.where(wheel, rng.normal(0.0, 1.0, size=len(dop)) * params.wheel_doppler_std, 0.0)
            parts.append(np.column_stack([pos, dop, sig]))
            center = _to_sensor(np.array([[car.x, car.y]]), sensor_world[k], ego_state.heading)[0]
            gt_box = OrientedBox2D(center[0], center[1], car.heading - ego_state.heading,
                                   params.car_length, params.car_width)
        structures, structures_s = _ensure_structures(
            clutter_rng, structures, sensor_world[k], ego_state.heading, params, sensor)
        cpos = clutter_points(rng, structures_s, params, sensor)
        cdop = rng.normal(0.0, params.clutter_doppler_std, size=len(cpos))
        crcs = rng.normal(params.clutter_rcs_mean, params.clutter_rcs_std, size=len(cpos))
        cpos, cdop, crcs = apply_sensor_noise(rng, cpos, cdop, crcs, sensor)
        parts.append(np.column_stack([cpos, cdop, crcs]))
        targets = np.concatenate(parts, axis=0) if parts else np.zeros((0, 4))
        frame = RadarFrame.from_arrays(k, spec.maneuver_id, targets, ego, gt_box)
        frames.append(auto_label(frame, label_growth) if label else frame)
    return frames
