"""Patch proposal, center-view normalization, sampling, augmentation and splits.

A patch is the set of targets inside a ``patch_size`` square around one
anchor target. The square is aligned with the anchor's line of sight, which
keeps patch membership invariant under rotations about the sensor origin.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from radar_pointnet.core_types import CAR, CLUTTER, OrientedBox2D, RadarFrame

log = logging.getLogger(__name__)

PATCH_SIZE = 10.0
NUM_POINTS = 48
BOX_POINTS = 32
MIN_CAR_POINTS = 2
MIN_CLUTTER_POINTS = 16
SPLIT_RATIOS = (61.68, 19.62, 18.70)
TEST_KINDS = (
    "circle_around_ego",
    "cross_standing_ego",
    "pass_standing_ego",
    "follow",
    "follow_overtake",
)


@dataclass(frozen=True)
class RawPatch:
    """Targets of ``frame`` around ``frame.targets[anchor_index]``."""

    frame: RadarFrame
    anchor_index: int
    member_indices: np.ndarray

    @property
    def anchor(self) -> Tuple[float, float]:
        t = self.frame.targets[self.anchor_index]
        return (t.x, t.y)


@dataclass(frozen=True, eq=False)
class Patch:
    """Center-view patch.

    ``points`` rows are ``x, y, v_r, rcs``. ``source_index`` maps every row to
    its target index in the originating frame; padded rows repeat a source.
    """

    points: np.ndarray
    point_labels: np.ndarray
    source_index: np.ndarray
    valid_count: int
    patch_label: int
    view_angle: float
    anchor: Tuple[float, float]
    anchor_index: int
    gt_box_local: Optional[OrientedBox2D]
    provenance: Tuple[str, int]

    @property
    def anchor_range(self) -> float:
        return math.hypot(*self.anchor)

    @property
    def num_car(self) -> int:
        return int(np.sum(self.point_labels[self._distinct()] == CAR))

    @property
    def num_clutter(self) -> int:
        return int(np.sum(self.point_labels[self._distinct()] == CLUTTER))

    def _distinct(self) -> np.ndarray:
        _, first = np.unique(self.source_index, return_index=True)
        return first

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Patch):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.point_labels, other.point_labels)
                and np.array_equal(self.source_index, other.source_index)
                and self.valid_count == other.valid_count
                and self.patch_label == other.patch_label
                and self.view_angle == other.view_angle
                and self.anchor == other.anchor
                and self.anchor_index == other.anchor_index
                and self.gt_box_local == other.gt_box_local
                and self.provenance == other.provenance)


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def propose_patches(frame: RadarFrame, patch_size: float = PATCH_SIZE) -> List[RawPatch]:
    """One patch per target, holding every target within the anchor's square."""
    if len(frame) == 0:
        return []
    xy = frame.target_array()[:, :2]
    half = 0.5 * patch_size
    out = []
    for i, (ax, ay) in enumerate(xy):
        phi = math.atan2(ay, ax)
        local = (xy - xy[i]) @ _rotation(phi)  # rows rotated by -phi
        inside = (np.abs(local[:, 0]) <= half) & (np.abs(local[:, 1]) <= half)
        out.append(RawPatch(frame, i, np.flatnonzero(inside)))
    return out


def center_view_normalize(raw: RawPatch) -> Patch:
    """Rotate the patch about the sensor so its anchor lies on the +x axis."""
    ax, ay = raw.anchor
    if math.hypot(ax, ay) <= 0.0:
        raise ValueError("anchor at the sensor origin has no viewing direction")
    view_angle = math.atan2(ay, ax)
    data = raw.frame.target_array()[raw.member_indices]
    points = data.copy()
    points[:, :2] = data[:, :2] @ _rotation(view_angle)
    labels = raw.frame.point_labels
    if labels is None:
        point_labels = np.zeros(len(raw.member_indices), dtype=np.int64)
        anchor_label = CLUTTER
    else:
        point_labels = np.asarray(labels, dtype=np.int64)[raw.member_indices]
        anchor_label = labels[raw.anchor_index]
    gt_local = None
    if anchor_label == CAR and raw.frame.gt_box is not None:
        gt_local = raw.frame.gt_box.transformed(-view_angle)
    return Patch(
        points=points,
        point_labels=point_labels,
        source_index=np.asarray(raw.member_indices, dtype=np.int64),
        valid_count=len(raw.member_indices),
        patch_label=CAR if gt_local is not None else CLUTTER,
        view_angle=view_angle,
        anchor=(ax, ay),
        anchor_index=raw.anchor_index,
        gt_box_local=gt_local,
        provenance=(raw.frame.maneuver_id, raw.frame.frame_id),
    )


def frame_patches(frame: RadarFrame, patch_size: float = PATCH_SIZE) -> List[Patch]:
    return [center_view_normalize(p) for p in propose_patches(frame, patch_size)]


def filter_valid(patches: Iterable[Patch], min_car: int = MIN_CAR_POINTS,
                 min_clutter: int = MIN_CLUTTER_POINTS) -> List[Patch]:
    """Keep car patches with enough car points and clutter patches with enough clutter."""
    kept = []
    for p in patches:
        if p.patch_label == CAR:
            if p.num_car >= min_car:
                kept.append(p)
        elif p.num_clutter >= min_clutter:
            kept.append(p)
    return kept


def sample_points(patch: Patch, rng: np.random.Generator, n: int = NUM_POINTS,
                  mode: str = "test") -> Patch:
    """Draw a fixed-size point set.

    Train mode on car patches keeps every car point and fills up with clutter.
    Otherwise sampling ignores classes. The anchor is always kept; sets smaller
    than ``n`` are padded by drawing with replacement from all points, in both
    modes, so padding statistics match between training and inference.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    total = len(patch.points)
    if total == 0:
        raise ValueError("cannot sample an empty patch")
    anchor_rows = np.flatnonzero(patch.source_index == patch.anchor_index)
    anchor_row = int(anchor_rows[0]) if len(anchor_rows) else None

    if mode == "train" and patch.patch_label == CAR:
        car = np.flatnonzero(patch.point_labels == CAR)
        clutter = np.flatnonzero(patch.point_labels != CAR)
        if len(car) >= n:
            rest = car[car != anchor_row] if anchor_row is not None else car
            chosen = rng.choice(rest, size=n - (anchor_row is not None), replace=False)
            if anchor_row is not None:
                chosen = np.concatenate([[anchor_row], chosen])
        elif total >= n:
            chosen = np.concatenate([car, rng.choice(clutter, size=n - len(car), replace=False)])
        else:
            chosen = np.concatenate([np.arange(total), rng.choice(total, size=n - total)])
    else:
        others = np.arange(total)
        head: List[int] = []
        if anchor_row is not None:
            others = others[others != anchor_row]
            head = [anchor_row]
        if total >= n:
            chosen = np.concatenate([head, rng.choice(others, size=n - len(head), replace=False)])
        else:
            chosen = np.concatenate([np.arange(total), rng.choice(total, size=n - total)])
    chosen = rng.permutation(chosen.astype(np.int64))
    return replace(
        patch,
        points=patch.points[chosen],
        point_labels=patch.point_labels[chosen],
        source_index=patch.source_index[chosen],
        valid_count=int(len(np.unique(chosen))),
    )


@dataclass(frozen=True)
class AugmentConfig:
    shift_range: float = 1.0
    doppler_std: float = 0.2
    rcs_std: float = 1.0


def augment(patch: Patch, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> Patch:
    """Random rigid shift of the whole patch, Doppler and RCS noise on car points."""
    shift = rng.uniform(-config.shift_range, config.shift_range, size=2)
    points = patch.points.copy()
    points[:, :2] += shift
    car = patch.point_labels == CAR
    n = len(points)
    dv = rng.normal(0.0, config.doppler_std, size=n)
    drcs = rng.normal(0.0, config.rcs_std, size=n)
    points[car, 2] += dv[car]
    points[car, 3] += drcs[car]
    box = patch.gt_box_local
    if box is not None:
        box = OrientedBox2D(box.xc + shift[0], box.yc + shift[1], box.theta, box.length, box.width)
    return replace(patch, points=points, gt_box_local=box)


# ---------------------------------------------------------------------------
# splits


def maneuver_kind(maneuver_id: str) -> str:
    return maneuver_id.rsplit("-", 1)[0]


def assign_splits(maneuver_ids: Sequence[str], test_kinds: Sequence[str] = TEST_KINDS,
                  ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> Dict[str, str]:
    """Instance-level split manifest ``maneuver_id -> train|val|test``.

    Instances of held-out kinds go to test. For every other kind, the instances
    are shuffled and divided train:val in proportion to ``ratios[0]:ratios[1]``.
    """
    by_kind: Dict[str, List[str]] = defaultdict(list)
    for mid in sorted(set(maneuver_ids)):
        by_kind[maneuver_kind(mid)].append(mid)
    rng = np.random.default_rng(seed)
    manifest: Dict[str, str] = {}
    val_share = ratios[1] / (ratios[0] + ratios[1])
    for kind in sorted(by_kind):
        ids = by_kind[kind]
        if kind in test_kinds:
            manifest.update({mid: "test" for mid in ids})
            continue
        if len(ids) == 1:
            log.warning("maneuver kind %s has a single instance; assigned to train", kind)
            manifest[ids[0]] = "train"
            continue
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_val = min(len(ids) - 1, max(1, int(round(len(ids) * val_share))))
        for i, mid in enumerate(order):
            manifest[mid] = "val" if i < n_val else "train"
    return manifest


def train_val_counts(n_instances: int, ratio: Tuple[float, float]) -> Tuple[int, int]:
    """Instances going to (train, val) for one kind."""
    if n_instances == 1:
        return 1, 0
    val_share = ratio[1] / (ratio[0] + ratio[1])
    n_val = min(n_instances - 1, max(1, int(round(n_instances * val_share))))
    return n_instances - n_val, n_val


@dataclass
class DatasetSplit:
    """Frames and patches per split plus the instance manifest."""

    frames: Dict[str, List[RadarFrame]]
    manifest: Dict[str, str]
    train: List[Patch] = field(default_factory=list)
    val: List[Patch] = field(default_factory=list)
    test: List[Patch] = field(default_factory=list)
    meta: Dict = field(default_factory=dict)

    def patches(self, split: str) -> List[Patch]:
        return getattr(self, split)

    def shares(self) -> Dict[str, float]:
        counts = {s: len(self.patches(s)) for s in ("train", "val", "test")}
        total = sum(counts.values()) or 1
        return {s: 100.0 * c / total for s, c in counts.items()}

    def car_fraction(self) -> float:
        all_patches = self.train + self.val + self.test
        if not all_patches:
            return 0.0
        return sum(p.patch_label == CAR for p in all_patches) / len(all_patches)


def split_dataset(frames: Iterable[RadarFrame], manifest: Mapping[str, str],
                  patch_size: float = PATCH_SIZE, min_car: int = MIN_CAR_POINTS,
                  min_clutter: int = MIN_CLUTTER_POINTS, meta: Optional[Dict] = None) -> DatasetSplit:
    """Group frames by the manifest and materialize valid patches per split."""
    grouped: Dict[str, List[RadarFrame]] = {"train": [], "val": [], "test": []}
    for frame in frames:
        try:
            grouped[manifest[frame.maneuver_id]].append(frame)
        except KeyError:
            raise ValueError(f"maneuver {frame.maneuver_id!r} missing from split manifest") from None
    split = DatasetSplit(frames=grouped, manifest=dict(manifest), meta=dict(meta or {}))
    for name, group in grouped.items():
        patches: List[Patch] = []
        for frame in group:
            patches.extend(filter_valid(frame_patches(frame, patch_size), min_car, min_clutter))
        setattr(split, name, patches)
    return split


def feature_stats(frames: Iterable[RadarFrame]) -> Dict[str, float]:
    """Mean and std of Doppler and RCS over all targets."""
    arrays = [f.target_array() for f in frames if len(f)]
    data = np.concatenate(arrays, axis=0) if arrays else np.zeros((0, 4))
    if len(data) == 0:
        return {"v_r_mean": 0.0, "v_r_std": 1.0, "rcs_mean": 0.0, "rcs_std": 1.0}
    return {
        "v_r_mean": float(data[:, 2].mean()),
        "v_r_std": float(max(data[:, 2].std(), 1e-6)),
        "rcs_mean": float(data[:, 3].mean()),
        "rcs_std": float(max(data[:, 3].std(), 1e-6)),
    }
