"""Classification, segmentation and box metrics over patches and raw frames."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from radar_pointnet.core_types import CAR, RadarFrame
from radar_pointnet.geometry import iou
from radar_pointnet.model import DetectionOutput, RadarPointNet, detect_patches
from radar_pointnet.patches import Patch, frame_patches, maneuver_kind, sample_points
from radar_pointnet.sim import MANEUVER_TITLES

IOU_THRESHOLD = 0.7

Detector = Callable[[Sequence[Patch], np.random.Generator], List[DetectionOutput]]


def f1_score(tp: int, fp: int, fn: int) -> float:
    """Harmonic mean of precision and recall; 0 when undefined."""
    if tp <= 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, truth: np.ndarray, pred: np.ndarray) -> None:
        truth = np.asarray(truth, dtype=bool)
        pred = np.asarray(pred, dtype=bool)
        self.tp += int(np.sum(truth & pred))
        self.fp += int(np.sum(~truth & pred))
        self.fn += int(np.sum(truth & ~pred))
        self.tn += int(np.sum(~truth & ~pred))

    def merge(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.tp, self.fp, self.fn)


@dataclass
class ScopeAccumulator:
    cls: Confusion = field(default_factory=Confusion)
    seg: Confusion = field(default_factory=Confusion)
    ious: List[float] = field(default_factory=list)

    def merge(self, other: "ScopeAccumulator") -> "ScopeAccumulator":
        return ScopeAccumulator(self.cls.merge(other.cls), self.seg.merge(other.seg),
                                self.ious + other.ious)

    def metrics(self) -> "ScopeMetrics":
        ious = np.asarray(self.ious, dtype=float)
        return ScopeMetrics(
            cls_accuracy=self.cls.accuracy,
            cls_f1=self.cls.f1,
            seg_accuracy=self.seg.accuracy,
            seg_f1=self.seg.f1,
            miou=float(ious.mean()) if len(ious) else 0.0,
            iou_at_0_7=float(np.mean(ious >= IOU_THRESHOLD)) if len(ious) else 0.0,
            num_patches=self.cls.total,
            num_car_patches=self.cls.tp + self.cls.fn,
            num_points=self.seg.total,
            num_boxes=len(ious),
        )


@dataclass
class ScopeMetrics:
    cls_accuracy: float
    cls_f1: float
    seg_accuracy: float
    seg_f1: float
    miou: float
    iou_at_0_7: float
    num_patches: int
    num_car_patches: int
    num_points: int
    num_boxes: int


@dataclass
class EvalReport:
    overall: ScopeMetrics
    per_maneuver: Dict[str, ScopeMetrics]
    ms_per_patch: float

    def to_dict(self) -> Dict:
        return {
            "overall": asdict(self.overall),
            "per_maneuver": {k: {"title": MANEUVER_TITLES.get(k, k), **asdict(v)}
                             for k, v in self.per_maneuver.items()},
            "timing": {"ms_per_patch": self.ms_per_patch},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = (f"{'Test data':<56} {'Cls Acc':>8} {'Cls F1':>8} {'Seg Acc':>8} {'Seg F1':>8} "
                  f"{'mIoU':>6} {'IoU>=0.7':>9}")
        lines = [header, "-" * len(header)]

        def row(name: str, m: ScopeMetrics) -> str:
            return (f"{name:<56} {100 * m.cls_accuracy:7.2f}% {100 * m.cls_f1:7.2f}% "
                    f"{100 * m.seg_accuracy:7.2f}% {100 * m.seg_f1:7.2f}% {m.miou:6.2f} "
                    f"{100 * m.iou_at_0_7:8.2f}%")

        lines.append(row("entire test dataset", self.overall))
        for kind, m in self.per_maneuver.items():
            lines.append(row(MANEUVER_TITLES.get(kind, kind), m))
        lines.append(f"inference: {self.ms_per_patch:.3f} ms per patch")
        return "\n".join(lines)


def _distinct_rows(patch: Patch) -> np.ndarray:
    _, first = np.unique(patch.source_index, return_index=True)
    return np.sort(first)


def score_patch(acc: ScopeAccumulator, patch: Patch, det: DetectionOutput) -> None:
    """Add one sampled patch and its detection to the accumulator."""
    truth_car = patch.patch_label == CAR
    pred_car = det.predicted_label == CAR
    acc.cls.add(np.array([truth_car]), np.array([pred_car]))
    if truth_car:
        rows = _distinct_rows(patch)
        acc.seg.add(patch.point_labels[rows] == CAR, det.mask[rows])
        if pred_car and det.box_local is not None and patch.gt_box_local is not None:
            acc.ious.append(iou(det.box_local, patch.gt_box_local))


def model_detector(model: RadarPointNet, threshold: Optional[float] = None) -> Detector:
    def run(patches: Sequence[Patch], rng: np.random.Generator) -> List[DetectionOutput]:
        return detect_patches(model, patches, rng, threshold)
    return run


def oracle_detector(patches: Sequence[Patch], rng: np.random.Generator) -> List[DetectionOutput]:
    """Perfect detections built from the labels; an upper bound for the harness."""
    out = []
    for p in patches:
        car = p.patch_label == CAR
        cls_logits = np.array([0.0, 1.0]) if car else np.array([1.0, 0.0])
        mask = p.point_labels == CAR
        point_logits = np.stack([~mask, mask], axis=1).astype(float)
        box_local = p.gt_box_local if car else None
        box = box_local.transformed(p.view_angle) if box_local is not None else None
        out.append(DetectionOutput(cls_logits, point_logits, mask, box, None, int(mask.sum()), box_local))
    return out


def evaluate_patches(detector: Detector, patches: Sequence[Patch], seed: int = 0,
                     num_points: int = 48) -> ScopeMetrics:
    """Metrics over prepared (normalized, possibly filtered) patches, test-mode sampling."""
    rng = np.random.default_rng(seed)
    sampled = [sample_points(p, rng, num_points, "test") for p in patches]
    acc = ScopeAccumulator()
    for p, det in zip(sampled, detector(sampled, rng)):
        score_patch(acc, p, det)
    return acc.metrics()


def evaluate(detector: Detector, frames: Iterable[RadarFrame], per_maneuver: bool = True,
             seed: int = 0, num_points: int = 48, patch_size: float = 10.0) -> EvalReport:
    """Full pipeline on raw frames: every target proposes a patch, no validity filtering."""
    rng = np.random.default_rng(seed)
    scopes: Dict[str, ScopeAccumulator] = {}
    n_patches = 0
    elapsed = 0.0
    for frame in frames:
        patches = [sample_points(p, rng, num_points, "test") for p in frame_patches(frame, patch_size)]
        if not patches:
            continue
        start = time.perf_counter()
        dets = detector(patches, rng)
        elapsed += time.perf_counter() - start
        n_patches += len(patches)
        acc = scopes.setdefault(maneuver_kind(frame.maneuver_id), ScopeAccumulator())
        for p, det in zip(patches, dets):
            score_patch(acc, p, det)
    overall = ScopeAccumulator()
    for acc in scopes.values():
        overall = overall.merge(acc)
    rows = {k: scopes[k].metrics() for k in sorted(scopes)} if per_maneuver else {}
    ms = 1000.0 * elapsed / n_patches if n_patches else 0.0
    return EvalReport(overall.metrics(), rows, ms)


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["overall", "per_maneuver", "timing"],
    "definitions": {
        "scope": {
            "type": "object",
            "required": ["cls_accuracy", "cls_f1", "seg_accuracy", "seg_f1", "miou", "iou_at_0_7",
                         "num_patches", "num_car_patches", "num_points", "num_boxes"],
            "properties": {
                **{k: {"type": "number", "minimum": 0, "maximum": 1}
                   for k in ("cls_accuracy", "cls_f1", "seg_accuracy", "seg_f1", "miou", "iou_at_0_7")},
                **{k: {"type": "integer", "minimum": 0}
                   for k in ("num_patches", "num_car_patches", "num_points", "num_boxes")},
                "title": {"type": "string"},
            },
            "additionalProperties": False,
        }
    },
    "properties": {
        "overall": {"$ref": "#/definitions/scope"},
        "per_maneuver": {"type": "object", "additionalProperties": {"$ref": "#/definitions/scope"}},
        "timing": {
            "type": "object",
            "required": ["ms_per_patch"],
            "properties": {"ms_per_patch": {"type": "number", "minimum": 0}},
        },
    },
    "additionalProperties": False,
}
