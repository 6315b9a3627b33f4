"""Multi-task loss: patch classification, point segmentation and box regression.

Per sample::

    total = w_cls * cls + w_seg * seg
            + w_box * (c1_reg + c2_reg + h_cls + h_reg + s_cls + s_reg + w_corner * corner)

``w_cls`` and ``w_seg`` depend on the patch class; ``w_box`` is zero for
clutter patches. The batch loss is the mean over samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

TERMS = ("cls", "seg", "c1_reg", "c2_reg", "h_cls", "h_reg", "s_cls", "s_reg", "corner")
BOX_TERMS = TERMS[2:]


@dataclass(frozen=True)
class LossWeights:
    w_cls_car: float = 2.0
    w_seg_car: float = 2.0
    w_cls_clutter: float = 1.0
    w_seg_clutter: float = 1.0
    w_box: float = 1.0
    w_corner: float = 10.0

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def smooth_l1(x, delta: float = 1.0):
    """Huber loss, summed over the elements of ``x``."""
    if isinstance(x, torch.Tensor):
        a = x.abs()
        return torch.where(a <= delta, 0.5 * x * x / delta, a - 0.5 * delta).sum()
    a = np.abs(np.asarray(x, dtype=float))
    return float(np.where(a <= delta, 0.5 * a * a / delta, a - 0.5 * delta).sum())


def _smooth_l1_rows(x: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = x.abs()
    v = torch.where(a <= delta, 0.5 * x * x / delta, a - 0.5 * delta)
    return v.reshape(v.shape[0], -1).sum(dim=1)


_CORNER_SIGNS = torch.tensor([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]], dtype=torch.float64)


def box_corners_torch(center: torch.Tensor, theta: torch.Tensor, size: torch.Tensor) -> torch.Tensor:
    """Corners ``(B, 4, 2)`` counter-clockwise from front-left."""
    local = _CORNER_SIGNS.to(center.dtype)[None] * size[:, None, :]
    c, s = torch.cos(theta)[:, None], torch.sin(theta)[:, None]
    x = c * local[..., 0] - s * local[..., 1] + center[:, 0:1]
    y = s * local[..., 0] + c * local[..., 1] + center[:, 1:2]
    return torch.stack([x, y], dim=-1)


def corner_distance_torch(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Summed corner distance minimized over the pi heading flip of ``gt``."""
    direct = torch.linalg.vector_norm(pred - gt, dim=-1).sum(dim=1)
    flipped_gt = torch.roll(gt, shifts=2, dims=1)
    flipped = torch.linalg.vector_norm(pred - flipped_gt, dim=-1).sum(dim=1)
    return torch.minimum(direct, flipped)


@dataclass
class BoxTargets:
    """Box targets for the car rows of a batch, in the center-view frame."""

    center: torch.Tensor  # (Bc, 2)
    heading_bin: torch.Tensor  # (Bc,)
    heading_residual: torch.Tensor  # (Bc,) radians
    size_template: torch.Tensor  # (Bc,)
    size_residual: torch.Tensor  # (Bc, 2) meters
    theta: torch.Tensor  # (Bc,)
    size: torch.Tensor  # (Bc, 2)


@dataclass
class LossBreakdown:
    """Total loss and batch means of each unweighted term.

    Box terms are averaged over the samples that carry a box target.
    ``per_sample`` holds the unweighted terms of every sample (zeros where a
    term is undefined) and ``weights`` the per-sample weights applied.
    """

    total: torch.Tensor
    terms: Dict[str, float]
    per_sample: Dict[str, torch.Tensor] = field(repr=False)
    sample_weights: Dict[str, torch.Tensor] = field(repr=False)
    w_corner: float = 10.0

    def recompute_total(self) -> float:
        ps, sw = self.per_sample, self.sample_weights
        box = sum(ps[t] for t in BOX_TERMS if t != "corner") + self.w_corner * ps["corner"]
        per = sw["cls"] * ps["cls"] + sw["seg"] * ps["seg"] + sw["box"] * box
        return float(per.detach().mean())

    def as_row(self) -> Dict[str, float]:
        row = {"total": float(self.total.detach())}
        row.update(self.terms)
        return row


def compute_loss(outputs: Dict, patch_label: torch.Tensor, point_labels: torch.Tensor,
                 weights: LossWeights = LossWeights(), car_rows: Optional[torch.Tensor] = None,
                 centroid: Optional[torch.Tensor] = None, box_targets: Optional[BoxTargets] = None,
                 num_heading_bins: int = 12, templates: Optional[torch.Tensor] = None,
                 point_weights: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Multi-task loss for a batch.

    Args:
        outputs: ``cls_logits (B, 2)``, ``seg_logits (B, N, 2)`` and, when the
            batch has car rows, ``box`` as returned by ``forward_box``.
        patch_label: ``(B,)`` patch classes selecting the per-sample weights.
        point_labels: ``(B, N)`` point classes.
        car_rows: rows of the batch that get box terms; their order matches
            the box outputs, ``centroid`` and ``box_targets``.
        point_weights: optional ``(B, N)`` weights for the segmentation mean,
            e.g. to ignore padded slots; defaults to uniform.
    """
    cls_logits, seg_logits = outputs["cls_logits"], outputs["seg_logits"]
    b = cls_logits.shape[0]
    dtype = cls_logits.dtype
    is_car = patch_label == 1

    cls = F.cross_entropy(cls_logits, patch_label, reduction="none")
    seg_pt = F.cross_entropy(seg_logits.reshape(-1, 2), point_labels.reshape(-1),
                             reduction="none").reshape(point_labels.shape)
    if point_weights is None:
        seg = seg_pt.mean(dim=1)
    else:
        seg = (seg_pt * point_weights).sum(dim=1) / point_weights.sum(dim=1).clamp_min(1e-12)

    per = {"cls": cls, "seg": seg}
    for t in BOX_TERMS:
        per[t] = torch.zeros(b, dtype=dtype)

    rows = car_rows if car_rows is not None else torch.zeros(0, dtype=torch.long)
    if len(rows) > 0:
        if box_targets is None or centroid is None or "box" not in outputs:
            raise ValueError("car patches need box outputs, centroids and ground-truth box targets")
        if not bool(is_car[rows].all()):
            raise ValueError("box targets given for a patch that is not labeled car")
        box = outputs["box"]
        nh = num_heading_bins
        bin_width = math.pi / nh
        target_offset = box_targets.center - centroid
        c1 = _smooth_l1_rows(box["center1"] - target_offset)
        c2 = _smooth_l1_rows(box["center"] - target_offset)
        hbin = box_targets.heading_bin
        sbin = box_targets.size_template
        h_cls = F.cross_entropy(box["heading_scores"], hbin, reduction="none")
        h_res_pred = box["heading_res_norm"].gather(1, hbin[:, None])[:, 0]
        h_reg = _smooth_l1_rows((h_res_pred - box_targets.heading_residual / bin_width)[:, None])
        s_cls = F.cross_entropy(box["size_scores"], sbin, reduction="none")
        idx = torch.arange(len(sbin))
        s_res_pred = box["size_res_norm"][idx, sbin]
        tmpl = templates.to(dtype)[sbin]
        s_reg = _smooth_l1_rows(s_res_pred - box_targets.size_residual / tmpl)

        # corners of the prediction read out at the ground-truth bins
        theta = (hbin.to(dtype) * (2.0 * math.pi / nh)) + h_res_pred * bin_width
        size = tmpl * (1.0 + s_res_pred)
        pred_corners = box_corners_torch(centroid + box["center"], theta, size)
        gt_corners = box_corners_torch(box_targets.center, box_targets.theta, box_targets.size)
        corner = _smooth_l1_rows(corner_distance_torch(pred_corners, gt_corners)[:, None])

        for name, value in (("c1_reg", c1), ("c2_reg", c2), ("h_cls", h_cls), ("h_reg", h_reg),
                            ("s_cls", s_cls), ("s_reg", s_reg), ("corner", corner)):
            per[name] = per[name].index_put((rows,), value)
    elif bool(is_car.any()) and weights.w_box > 0:
        raise ValueError("car patches in the batch but no box outputs were provided")

    w_cls = torch.where(is_car, weights.w_cls_car, weights.w_cls_clutter).to(dtype)
    w_seg = torch.where(is_car, weights.w_seg_car, weights.w_seg_clutter).to(dtype)
    has_box = torch.zeros(b, dtype=torch.bool)
    if len(rows) > 0:
        has_box[rows] = True
    w_box = torch.where(has_box, weights.w_box, 0.0).to(dtype)

    box_sum = sum(per[t] for t in BOX_TERMS if t != "corner") + weights.w_corner * per["corner"]
    # clutter rows: box terms are exactly zero and w_box is zero, so no gradient reaches the box head
    total = (w_cls * per["cls"] + w_seg * per["seg"] + w_box * box_sum).mean()

    n_box = max(int(has_box.sum()), 1)
    terms = {"cls": float(per["cls"].detach().mean()), "seg": float(per["seg"].detach().mean())}
    for t in BOX_TERMS:
        terms[t] = float(per[t].detach().sum()) / n_box
    return LossBreakdown(total, terms, per, {"cls": w_cls, "seg": w_seg, "box": w_box}, weights.w_corner)
