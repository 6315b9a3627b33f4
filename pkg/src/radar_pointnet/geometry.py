"""Oriented-box geometry and the bin/residual box encoding.

Corners are returned counter-clockwise starting at the front-left corner, so
corner ``k`` of a box and corner ``k`` of a prediction describe the same
physical corner when headings agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from radar_pointnet.core_types import OrientedBox2D, normalize_angle

NUM_HEADING_BINS = 12
DEFAULT_TEMPLATE = (4.6, 1.8)
AREA_EPS = 1e-12

# corner signs in the box frame: front-left, rear-left, rear-right, front-right
_CORNER_SIGNS = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])


def box_corners(box: OrientedBox2D) -> np.ndarray:
    """Four corners ``(4, 2)`` of the box, counter-clockwise."""
    local = _CORNER_SIGNS * np.array([box.length, box.width])
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.xc, box.yc])


def points_in_box(points: np.ndarray, box: OrientedBox2D,
                  grow_length: float = 0.0, grow_width: float = 0.0) -> np.ndarray:
    """Boolean mask of 2D points inside ``box`` grown by the given totals.

    The growth is total, split evenly between both sides. Boundary points count
    as inside.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = pts[:, 0] - box.xc
    dy = pts[:, 1] - box.yc
    along = c * dx + s * dy
    across = -s * dx + c * dy
    half_l = 0.5 * (box.length + grow_length)
    half_w = 0.5 * (box.width + grow_width)
    return (np.abs(along) <= half_l) & (np.abs(across) <= half_w)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area, positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clip``."""
    output: List[np.ndarray] = list(np.asarray(subject, dtype=float))
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p: np.ndarray) -> float:
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    if not output:
        return np.zeros((0, 2))
    return np.array(output)


def _intersect(p: np.ndarray, q: np.ndarray, sp: float, sq: float) -> np.ndarray:
    t = sp / (sp - sq)
    return p + t * (q - p)


def intersection_area(a: OrientedBox2D, b: OrientedBox2D) -> float:
    poly = clip_polygon(box_corners(a), box_corners(b))
    area = polygon_area(poly)
    return area if area > AREA_EPS else 0.0


def iou(a: OrientedBox2D, b: OrientedBox2D) -> float:
    """Footprint intersection over union of two oriented boxes."""
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.xc - b.xc, a.yc - b.yc) >= ra + rb:
        return 0.0
    # clip the smaller-index box by the other in a fixed order so iou(a, b) == iou(b, a)
    first, second = (a, b) if a.as_tuple() <= b.as_tuple() else (b, a)
    inter = intersection_area(first, second)
    if inter <= 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return float(min(1.0, max(0.0, inter / union)))


def flip_heading(box: OrientedBox2D) -> OrientedBox2D:
    return OrientedBox2D(box.xc, box.yc, box.theta + math.pi, box.length, box.width)


def corner_distance(pred: OrientedBox2D, gt: OrientedBox2D) -> float:
    """Summed corner distance, minimized over the two heading senses of ``gt``."""
    pc = box_corners(pred)
    direct = np.linalg.norm(pc - box_corners(gt), axis=1).sum()
    flipped = np.linalg.norm(pc - box_corners(flip_heading(gt)), axis=1).sum()
    return float(min(direct, flipped))


def heading_error(pred_theta: float, gt_theta: float) -> float:
    """Heading error modulo the pi ambiguity of a rectangle, in [0, pi/2]."""
    d = abs(normalize_angle(pred_theta - gt_theta))
    return min(d, math.pi - d)


# ---------------------------------------------------------------------------
# bin / residual encoding


@dataclass(frozen=True)
class SizeTemplateTable:
    templates: Tuple[Tuple[float, float], ...] = (DEFAULT_TEMPLATE,)

    def __post_init__(self) -> None:
        templates = tuple((float(l), float(w)) for l, w in self.templates)
        if not templates:
            raise ValueError("size template table must not be empty")
        for length, width in templates:
            if length <= 0 or width <= 0 or length < width:
                raise ValueError(f"invalid size template ({length}, {width})")
        object.__setattr__(self, "templates", templates)

    def __len__(self) -> int:
        return len(self.templates)

    def as_array(self) -> np.ndarray:
        return np.array(self.templates, dtype=float)


@dataclass(frozen=True)
class BoxTargetEncoding:
    center_delta: Tuple[float, float]
    heading_bin: int
    heading_residual: float
    size_template: int
    size_residual: Tuple[float, float]


def heading_bin_centers(num_bins: int = NUM_HEADING_BINS) -> np.ndarray:
    """Bin centers ``k * 2pi / NH`` wrapped to (-pi, pi]; bin 0 is heading 0."""
    return np.array([normalize_angle(2.0 * math.pi * k / num_bins) for k in range(num_bins)])


def angle_to_bin(theta: float, num_bins: int = NUM_HEADING_BINS) -> Tuple[int, float]:
    step = 2.0 * math.pi / num_bins
    k = int(round(normalize_angle(theta) / step)) % num_bins
    residual = normalize_angle(theta - k * step)
    return k, residual


def bin_to_angle(k: int, residual: float, num_bins: int = NUM_HEADING_BINS) -> float:
    return normalize_angle(2.0 * math.pi * k / num_bins + residual)


def encode_box(box: OrientedBox2D, origin: Sequence[float],
               templates: SizeTemplateTable = SizeTemplateTable(),
               num_heading_bins: int = NUM_HEADING_BINS) -> BoxTargetEncoding:
    if len(templates) == 0:
        raise ValueError("size template table must not be empty")
    k, residual = angle_to_bin(box.theta, num_heading_bins)
    sizes = templates.as_array()
    j = int(np.argmin(np.abs(sizes[:, 0] - box.length) + np.abs(sizes[:, 1] - box.width)))
    return BoxTargetEncoding(
        center_delta=(box.xc - origin[0], box.yc - origin[1]),
        heading_bin=k,
        heading_residual=residual,
        size_template=j,
        size_residual=(box.length - sizes[j, 0], box.width - sizes[j, 1]),
    )


def decode_box(enc: BoxTargetEncoding, origin: Sequence[float],
               templates: SizeTemplateTable = SizeTemplateTable(),
               num_heading_bins: int = NUM_HEADING_BINS) -> OrientedBox2D:
    if not 0 <= enc.heading_bin < num_heading_bins:
        raise ValueError(f"heading bin {enc.heading_bin} out of range [0, {num_heading_bins})")
    if not 0 <= enc.size_template < len(templates):
        raise ValueError(f"size template {enc.size_template} out of range [0, {len(templates)})")
    length, width = templates.templates[enc.size_template]
    return OrientedBox2D(
        origin[0] + enc.center_delta[0],
        origin[1] + enc.center_delta[1],
        bin_to_angle(enc.heading_bin, enc.heading_residual, num_heading_bins),
        length + enc.size_residual[0],
        width + enc.size_residual[1],
    )
