"""PointNet classification/segmentation network and T-Net + box regression network.

Stage 1 classifies a 48-point patch and segments its points; stage 2 takes
the segmented car points, normalized to their centroid, regresses a coarse
center shift (T-Net) and then the amodal box as center residual plus heading
and size bins with residuals.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from radar_pointnet.core_types import CAR, OrientedBox2D
from radar_pointnet.geometry import DEFAULT_TEMPLATE, NUM_HEADING_BINS, bin_to_angle
from radar_pointnet.patches import BOX_POINTS, NUM_POINTS, Patch


@dataclass(frozen=True)
class ModelConfig:
    seg_mlp: Tuple[int, ...] = (64, 64, 128, 256)
    # index into seg_mlp of the per-point feature reused by the segmentation head
    local_layer: int = 1
    cls_fc: Tuple[int, ...] = (128, 64)
    seg_head: Tuple[int, ...] = (256, 128, 64)
    dropout: float = 0.3
    tnet_mlp: Tuple[int, ...] = (128, 128, 256)
    tnet_fc: Tuple[int, ...] = (128, 64)
    box_mlp: Tuple[int, ...] = (128, 128, 256)
    box_fc: Tuple[int, ...] = (256, 128)
    num_heading_bins: int = NUM_HEADING_BINS
    size_templates: Tuple[Tuple[float, float], ...] = (DEFAULT_TEMPLATE,)
    num_points: int = NUM_POINTS
    box_points: int = BOX_POINTS
    bn_momentum: float = 0.1

    @property
    def num_sizes(self) -> int:
        return len(self.size_templates)

    @property
    def box_output_dim(self) -> int:
        return 2 + 2 * self.num_heading_bins + 3 * self.num_sizes

    def to_dict(self) -> Dict:
        d = asdict(self)
        return {k: [list(v) for v in d[k]] if k == "size_templates" else
                (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        kwargs = {}
        for k, v in d.items():
            if k == "size_templates":
                v = tuple(tuple(map(float, t)) for t in v)
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass(frozen=True)
class FeatureStats:
    v_r_mean: float = 0.0
    v_r_std: float = 1.0
    rcs_mean: float = 0.0
    rcs_std: float = 1.0


def one_hot_class(labels: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Class vector handed to the box network; carries no gradient."""
    return F.one_hot(labels, 2).to(dtype)


class BatchNorm(nn.BatchNorm1d):
    """Batch norm that falls back to running statistics for single-sample batches."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.dim() == 2 and x.shape[0] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                False, 0.0, self.eps)
        return super().forward(x)


def _point_mlp(in_ch: int, widths: Sequence[int], momentum: float) -> nn.ModuleList:
    layers = nn.ModuleList()
    for w in widths:
        # no bias: the following batch norm subtracts it again
        layers.append(nn.Sequential(nn.Conv1d(in_ch, w, 1, bias=False), BatchNorm(w, momentum=momentum), nn.ReLU()))
        in_ch = w
    return layers


def _fc_stack(in_ch: int, widths: Sequence[int], momentum: float, dropout: float = 0.0) -> nn.Sequential:
    layers: List[nn.Module] = []
    for w in widths:
        layers += [nn.Linear(in_ch, w, bias=False), BatchNorm(w, momentum=momentum), nn.ReLU()]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        in_ch = w
    return nn.Sequential(*layers)


class RadarPointNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), stats: FeatureStats = FeatureStats()):
        super().__init__()
        self.config = config
        self.stats = stats
        m = config.bn_momentum
        self.register_buffer("feature_shift", torch.tensor([0.0, 0.0, stats.v_r_mean, stats.rcs_mean]))
        self.register_buffer("feature_scale", torch.tensor([1.0, 1.0, stats.v_r_std, stats.rcs_std]))
        self.register_buffer("templates", torch.tensor(config.size_templates, dtype=torch.float32))

        self.seg_mlp = _point_mlp(4, config.seg_mlp, m)
        global_dim = config.seg_mlp[-1]
        local_dim = config.seg_mlp[config.local_layer]
        self.cls_fc = _fc_stack(global_dim, config.cls_fc, m, config.dropout)
        self.cls_out = nn.Linear(config.cls_fc[-1] if config.cls_fc else global_dim, 2)
        self.seg_head = _point_mlp(local_dim + global_dim + 2, config.seg_head, m)
        self.seg_out = nn.Conv1d(config.seg_head[-1], 2, 1)

        self.tnet_mlp = _point_mlp(4, config.tnet_mlp, m)
        self.tnet_fc = _fc_stack(config.tnet_mlp[-1], config.tnet_fc, m)
        self.tnet_out = nn.Linear(config.tnet_fc[-1], 2)
        self.box_mlp = _point_mlp(4, config.box_mlp, m)
        self.box_fc = _fc_stack(config.box_mlp[-1] + 2, config.box_fc, m)
        self.box_out = nn.Linear(config.box_fc[-1], config.box_output_dim)

    # -- input handling -----------------------------------------------------

    def standardize(self, points: torch.Tensor) -> torch.Tensor:
        return (points - self.feature_shift.to(points.dtype)) / self.feature_scale.to(points.dtype)

    def patch_features(self, points: torch.Tensor, anchor_range: torch.Tensor) -> torch.Tensor:
        """Network input from center-view points ``(B, N, 4)``: re-origined at the anchor."""
        shift = torch.zeros_like(points)
        shift[..., 0] = anchor_range.to(points.dtype)[:, None]
        return self.standardize(points - shift)

    # -- stage 1 ------------------------------------------------------------

    def forward_cls_seg(self, feats: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Patch logits ``(B, 2)`` and point logits ``(B, N, 2)`` from features ``(B, N, 4)``."""
        if not bool(torch.isfinite(feats).all()):
            raise ValueError("non-finite values in the network input")
        x = feats.transpose(1, 2)
        local = None
        for i, layer in enumerate(self.seg_mlp):
            x = layer(x)
            if i == self.config.local_layer:
                local = x
        global_feat = x.max(dim=2).values
        cls_logits = self.cls_out(self.cls_fc(global_feat))
        scores = F.softmax(cls_logits, dim=1)
        n = feats.shape[1]
        y = torch.cat([local, global_feat[:, :, None].expand(-1, -1, n),
                       scores[:, :, None].expand(-1, -1, n)], dim=1)
        for layer in self.seg_head:
            y = layer(y)
        seg_logits = self.seg_out(y).transpose(1, 2)
        return cls_logits, seg_logits

    # -- stage 2 ------------------------------------------------------------

    def forward_box(self, obj_points: torch.Tensor, class_scores: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Box regression from centroid-normalized object points ``(B, M, 4)`` (raw units)."""
        cfg = self.config
        feats = self.standardize(obj_points)
        x = feats.transpose(1, 2)
        for layer in self.tnet_mlp:
            x = layer(x)
        center1 = self.tnet_out(self.tnet_fc(x.max(dim=2).values))

        shifted = torch.cat([feats[..., :2] - center1[:, None, :], feats[..., 2:]], dim=2)
        x = shifted.transpose(1, 2)
        for layer in self.box_mlp:
            x = layer(x)
        g = torch.cat([x.max(dim=2).values, class_scores], dim=1)
        out = self.box_out(self.box_fc(g))

        nh, ns = cfg.num_heading_bins, cfg.num_sizes
        i = 2
        center2 = out[:, :2]
        heading_scores = out[:, i:i + nh]; i += nh
        heading_res_norm = out[:, i:i + nh]; i += nh
        size_scores = out[:, i:i + ns]; i += ns
        size_res_norm = out[:, i:i + 2 * ns].reshape(-1, ns, 2)
        return {
            "center1": center1,
            "center_delta2": center2,
            "center": center1 + center2,
            "heading_scores": heading_scores,
            "heading_res_norm": heading_res_norm,
            "heading_res": heading_res_norm * (math.pi / nh),
            "size_scores": size_scores,
            "size_res_norm": size_res_norm,
            "size_res": size_res_norm * self.templates.to(out.dtype)[None],
            "raw": torch.cat([center1, out], dim=1),
        }

    def forward(self, feats: torch.Tensor, obj_points: Optional[torch.Tensor] = None,
                car_rows: Optional[torch.Tensor] = None,
                class_labels: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        """Both stages; the box net runs on ``car_rows`` only.

        ``class_labels`` (one per car row) selects the class vector fed to the
        box net; by default the predicted patch class is used.
        """
        cls_logits, seg_logits = self.forward_cls_seg(feats)
        out = {"cls_logits": cls_logits, "seg_logits": seg_logits}
        if obj_points is not None and car_rows is not None and len(car_rows) > 0:
            labels = cls_logits.argmax(dim=1)[car_rows] if class_labels is None else class_labels
            out["box"] = self.forward_box(obj_points, one_hot_class(labels, cls_logits.dtype))
        return out


# ---------------------------------------------------------------------------
# masking, box-point sampling and decoding


def select_box_points(mask: np.ndarray, rng: np.random.Generator, m: int = BOX_POINTS) -> np.ndarray:
    """Indices of ``m`` rows drawn from the selected rows of ``mask``."""
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("no selected points to sample from")
    if len(rows) >= m:
        return rng.choice(rows, size=m, replace=False)
    return np.concatenate([rows, rng.choice(rows, size=m - len(rows))])


def mask_and_normalize(points: np.ndarray, point_logits: np.ndarray,
                       threshold: Optional[float] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Select car points and return ``(mask, centroid)``; centroid is None if nothing is selected.

    With ``threshold=None`` a point is selected when its car logit beats the
    clutter logit; otherwise when its car softmax probability exceeds it.
    """
    logits = np.asarray(point_logits, dtype=float)
    if threshold is None:
        mask = logits[:, CAR] > logits[:, 1 - CAR]
    else:
        shifted = logits - logits.max(axis=1, keepdims=True)
        prob = np.exp(shifted[:, CAR]) / np.exp(shifted).sum(axis=1)
        mask = prob > threshold
    if not mask.any():
        return mask, None
    return mask, points[mask, :2].mean(axis=0)


def normalized_object_points(points: np.ndarray, rows: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    obj = points[rows].copy()
    obj[:, :2] -= centroid
    return obj


@dataclass
class DetectionOutput:
    patch_class_logits: np.ndarray
    point_logits: np.ndarray
    mask: np.ndarray
    box: Optional[OrientedBox2D]
    box_encoding_raw: Optional[np.ndarray]
    m_segmented: int
    box_local: Optional[OrientedBox2D] = None

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.patch_class_logits))


def decode_raw_box(raw: Dict[str, np.ndarray], centroid: Sequence[float],
                   config: ModelConfig) -> OrientedBox2D:
    """Box in the center-view frame from one sample's box-head outputs."""
    k = int(np.argmax(raw["heading_scores"]))
    j = int(np.argmax(raw["size_scores"]))
    center = np.asarray(centroid) + np.asarray(raw["center"])
    theta = bin_to_angle(k, float(raw["heading_res"][k]), config.num_heading_bins)
    length, width = config.size_templates[j]
    res = np.asarray(raw["size_res"])[j]
    return OrientedBox2D(float(center[0]), float(center[1]), theta,
                         max(length + float(res[0]), 1e-3), max(width + float(res[1]), 1e-3))


def assemble_detection(patch: Patch, cls_logits: np.ndarray, point_logits: np.ndarray,
                       mask: np.ndarray, raw: Optional[Dict[str, np.ndarray]],
                       centroid: Optional[np.ndarray], config: ModelConfig) -> DetectionOutput:
    """Combine stage outputs and map the box back to the sensor frame."""
    m = int(mask.sum())
    is_car = int(np.argmax(cls_logits)) == CAR
    box = box_local = None
    raw_vec = None
    if is_car and m >= 1 and raw is not None and centroid is not None:
        box_local = decode_raw_box(raw, centroid, config)
        box = box_local.transformed(patch.view_angle)
        raw_vec = np.asarray(raw.get("raw")) if raw.get("raw") is not None else None
    return DetectionOutput(cls_logits, point_logits, mask, box, raw_vec, m, box_local)


def _to_numpy(d: Dict[str, torch.Tensor], i: int) -> Dict[str, np.ndarray]:
    return {k: v[i].detach().cpu().numpy() for k, v in d.items()}


@torch.no_grad()
def detect_patches(model: RadarPointNet, patches: Sequence[Patch], rng: np.random.Generator,
                   threshold: Optional[float] = None, batch_size: int = 256) -> List[DetectionOutput]:
    """Run the full two-stage pipeline on fixed-size (already sampled) patches."""
    model.eval()
    dtype = next(model.parameters()).dtype
    results: List[DetectionOutput] = []
    cfg = model.config
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        pts = torch.tensor(np.stack([p.points for p in chunk]), dtype=dtype)
        ranges = torch.tensor([p.anchor_range for p in chunk], dtype=dtype)
        cls_logits, seg_logits = model.forward_cls_seg(model.patch_features(pts, ranges))
        cls_np = cls_logits.cpu().numpy()
        seg_np = seg_logits.cpu().numpy()
        masks, centroids, rows_for_box, objs = [], [], [], []
        for i, p in enumerate(chunk):
            mask, centroid = mask_and_normalize(p.points, seg_np[i], threshold)
            masks.append(mask)
            centroids.append(centroid)
            if np.argmax(cls_np[i]) == CAR and centroid is not None:
                rows = select_box_points(mask, rng, cfg.box_points)
                objs.append(normalized_object_points(p.points, rows, centroid))
                rows_for_box.append(i)
        raw_by_row: Dict[int, Dict[str, np.ndarray]] = {}
        if rows_for_box:
            obj = torch.tensor(np.stack(objs), dtype=dtype)
            labels = cls_logits.argmax(dim=1)[rows_for_box]
            box = model.forward_box(obj, one_hot_class(labels, dtype))
            for j, i in enumerate(rows_for_box):
                raw_by_row[i] = _to_numpy(box, j)
        for i, p in enumerate(chunk):
            results.append(assemble_detection(p, cls_np[i], seg_np[i], masks[i],
                                              raw_by_row.get(i), centroids[i], cfg))
    return results
