"""Adam training loop, batch collation and checkpoint files."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from radar_pointnet.core_types import CAR
from radar_pointnet.evaluation import ScopeMetrics, evaluate_patches, model_detector
from radar_pointnet.geometry import SizeTemplateTable, encode_box
from radar_pointnet.loss import BoxTargets, LossBreakdown, LossWeights, TERMS, compute_loss
from radar_pointnet.model import (
    FeatureStats,
    ModelConfig,
    RadarPointNet,
    mask_and_normalize,
    normalized_object_points,
    one_hot_class,
    select_box_points,
)
from radar_pointnet.patches import AugmentConfig, Patch, augment, sample_points

log = logging.getLogger(__name__)

EPOCH_SEED_STRIDE = 10007


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 11
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    # rows fed to the box network during training: "label" uses the labeled
    # car points, "predicted" the argmax of the segmentation head
    box_mask: str = "label"
    # patches passed through the box network: "all" runs it on every patch so
    # its batch norms see the whole batch (the loss still only uses car rows),
    # "car" only on the car rows
    box_batch: str = "all"
    validate: bool = True

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.box_mask not in ("label", "predicted"):
            raise ValueError("box_mask must be 'label' or 'predicted'")
        if self.box_batch not in ("all", "car"):
            raise ValueError("box_batch must be 'all' or 'car'")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, dump_path: Optional[Path]):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class Batch:
    points: torch.Tensor
    feats: torch.Tensor
    patch_label: torch.Tensor
    point_labels: torch.Tensor
    patches: Sequence[Patch]


def collate(patches: Sequence[Patch], model: RadarPointNet,
            dtype: torch.dtype = torch.float32) -> Batch:
    pts = torch.tensor(np.stack([p.points for p in patches]), dtype=dtype)
    ranges = torch.tensor([p.anchor_range for p in patches], dtype=dtype)
    return Batch(
        points=pts,
        feats=model.patch_features(pts, ranges),
        patch_label=torch.tensor([p.patch_label for p in patches], dtype=torch.long),
        point_labels=torch.tensor(np.stack([p.point_labels for p in patches]), dtype=torch.long),
        patches=patches,
    )


def box_inputs(batch: Batch, rng: np.random.Generator, config: ModelConfig,
               seg_logits: Optional[np.ndarray] = None, dtype: torch.dtype = torch.float32):
    """Object points, centroids and box targets for the car rows of a batch.

    Rows are chosen from the labeled car points, or from the predicted mask
    when ``seg_logits`` is given (falling back to the labels if it is empty).
    """
    templates = SizeTemplateTable(config.size_templates)
    rows, objs, centroids, encs, boxes = [], [], [], [], []
    for i, p in enumerate(batch.patches):
        if p.patch_label != CAR:
            continue
        if p.gt_box_local is None:
            raise ValueError("car patch without a ground-truth box")
        mask = p.point_labels == CAR
        centroid = p.points[mask, :2].mean(axis=0) if mask.any() else None
        if seg_logits is not None:
            pred_mask, pred_centroid = mask_and_normalize(p.points, seg_logits[i])
            if pred_centroid is not None:
                mask, centroid = pred_mask, pred_centroid
        if centroid is None:
            continue
        sel = select_box_points(mask, rng, config.box_points)
        rows.append(i)
        objs.append(normalized_object_points(p.points, sel, centroid))
        centroids.append(centroid)
        encs.append(encode_box(p.gt_box_local, (0.0, 0.0), templates, config.num_heading_bins))
        boxes.append(p.gt_box_local)
    if not rows:
        return torch.zeros(0, dtype=torch.long), None, None, None
    targets = BoxTargets(
        center=torch.tensor([e.center_delta for e in encs], dtype=dtype),
        heading_bin=torch.tensor([e.heading_bin for e in encs], dtype=torch.long),
        heading_residual=torch.tensor([e.heading_residual for e in encs], dtype=dtype),
        size_template=torch.tensor([e.size_template for e in encs], dtype=torch.long),
        size_residual=torch.tensor([e.size_residual for e in encs], dtype=dtype),
        theta=torch.tensor([b.theta for b in boxes], dtype=dtype),
        size=torch.tensor([[b.length, b.width] for b in boxes], dtype=dtype),
    )
    return (torch.tensor(rows, dtype=torch.long), torch.tensor(np.stack(objs), dtype=dtype),
            torch.tensor(np.stack(centroids), dtype=dtype), targets)


def context_points(patch: Patch, rng: np.random.Generator, m: int) -> np.ndarray:
    """Box-net input for a patch without box target: its points about their own centroid."""
    centroid = patch.points[:, :2].mean(axis=0)
    rows = select_box_points(np.ones(len(patch.points), dtype=bool), rng, m)
    return normalized_object_points(patch.points, rows, centroid)


def box_forward(model: RadarPointNet, batch: Batch, rng: np.random.Generator,
                seg_logits: Optional[np.ndarray] = None, box_batch: str = "all"):
    """Box outputs for the car rows of a batch plus the matching rows, centroids and targets.

    With ``box_batch="all"`` the other patches run through the box network as
    well, only to share its batch statistics; their outputs are dropped.
    """
    dtype = batch.feats.dtype
    rows, obj, centroid, targets = box_inputs(batch, rng, model.config, seg_logits, dtype)
    if len(rows) == 0:
        return None, rows, centroid, targets
    labels = batch.patch_label
    if box_batch == "car":
        return model.forward_box(obj, one_hot_class(labels[rows], dtype)), rows, centroid, targets
    car_slot = {int(i): j for j, i in enumerate(rows)}
    pieces = [obj[car_slot[i]] if i in car_slot else
              torch.tensor(context_points(p, rng, model.config.box_points), dtype=dtype)
              for i, p in enumerate(batch.patches)]
    out = model.forward_box(torch.stack(pieces), one_hot_class(labels, dtype))
    return {k: v[rows] for k, v in out.items()}, rows, centroid, targets


def batch_loss(model: RadarPointNet, batch: Batch, rng: np.random.Generator,
               weights: LossWeights = LossWeights(), box_mask: str = "label",
               box_batch: str = "all") -> LossBreakdown:
    """Forward both stages on a collated batch and return the multi-task loss."""
    cls_logits, seg_logits = model.forward_cls_seg(batch.feats)
    seg_np = seg_logits.detach().cpu().numpy() if box_mask == "predicted" else None
    box, rows, centroid, targets = box_forward(model, batch, rng, seg_np, box_batch)
    outputs: Dict = {"cls_logits": cls_logits, "seg_logits": seg_logits}
    if box is not None:
        outputs["box"] = box
    return compute_loss(outputs, batch.patch_label, batch.point_labels, weights,
                        car_rows=rows, centroid=centroid, box_targets=targets,
                        num_heading_bins=model.config.num_heading_bins,
                        templates=model.templates)


@dataclass
class TrainResult:
    history: List[Dict[str, float]]
    val_history: List[Dict[str, float]]
    best_state: Dict[str, torch.Tensor]
    best_epoch: int
    best_score: float
    final_loss: float


def selection_score(m: ScopeMetrics) -> float:
    return m.seg_f1 + m.miou


def epoch_patches(patches: Sequence[Patch], epoch_seed: int, num_points: int,
                  augmentation: Optional[AugmentConfig]) -> List[Patch]:
    rng = np.random.default_rng(epoch_seed)
    out = []
    for p in patches:
        s = sample_points(p, rng, num_points, "train")
        out.append(augment(s, rng, augmentation) if augmentation is not None else s)
    return out


def train(model: RadarPointNet, train_patches: Sequence[Patch], config: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), val_patches: Optional[Sequence[Patch]] = None,
          augmentation: Optional[AugmentConfig] = AugmentConfig(),
          dump_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[int, Dict[str, float]], None]] = None) -> TrainResult:
    """Adam training for ``config.epochs`` passes with per-epoch resampling."""
    if not train_patches:
        raise ValueError("training split is empty")
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas), eps=config.eps)
    dtype = next(model.parameters()).dtype
    history: List[Dict[str, float]] = []
    val_history: List[Dict[str, float]] = []
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_score = -1, -math.inf
    step = 0
    loss_value = float("nan")
    for epoch in range(config.epochs):
        epoch_seed = config.seed + epoch * EPOCH_SEED_STRIDE
        patches = epoch_patches(train_patches, epoch_seed, model.config.num_points, augmentation)
        rng = np.random.default_rng(epoch_seed + 1)
        order = rng.permutation(len(patches))
        model.train()
        for start in range(0, len(order), config.batch_size):
            chunk = [patches[i] for i in order[start:start + config.batch_size]]
            batch = collate(chunk, model, dtype)
            breakdown = batch_loss(model, batch, rng, weights, config.box_mask, config.box_batch)
            loss_value = float(breakdown.total.detach())
            if not math.isfinite(loss_value):
                path = _dump_batch(dump_dir, epoch, step, chunk)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}", path)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            history.append({"epoch": epoch, "step": step, **breakdown.as_row()})
            step += 1
        summary: Dict[str, float] = {"epoch": epoch}
        if val_patches and config.validate:
            metrics = evaluate_patches(model_detector(model), val_patches, seed=config.seed)
            score = selection_score(metrics)
            summary.update(asdict(metrics))
            summary["score"] = score
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
        else:
            best_state, best_epoch = copy.deepcopy(model.state_dict()), epoch
        val_history.append(summary)
        log.info("epoch %d loss %.4f %s", epoch, loss_value,
                 {k: round(v, 4) for k, v in summary.items() if isinstance(v, float)})
        if on_epoch is not None:
            on_epoch(epoch, summary)
    return TrainResult(history, val_history, best_state, best_epoch, best_score, loss_value)


def _dump_batch(dump_dir: Optional[Path], epoch: int, step: int, patches: Sequence[Patch]) -> Optional[Path]:
    if dump_dir is None:
        return None
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nan_batch_e{epoch}_s{step}.npz"
    np.savez(path,
             points=np.stack([p.points for p in patches]),
             point_labels=np.stack([p.point_labels for p in patches]),
             patch_label=np.array([p.patch_label for p in patches]),
             provenance=np.array([f"{p.provenance[0]}:{p.provenance[1]}" for p in patches]))
    return path


def write_loss_csv(path: Union[str, Path], history: Sequence[Dict[str, float]]) -> None:
    fields = ["epoch", "step", "total", *TERMS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in fields})


# ---------------------------------------------------------------------------
# checkpoints


class ArchitectureMismatchError(ValueError):
    pass


def save_checkpoint(model: RadarPointNet, out_dir: Union[str, Path],
                    metrics: Optional[Dict] = None, name: str = "checkpoint") -> Path:
    """Write ``<name>.json`` and a float32 little-endian tensor blob ``<name>.bin``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for key, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        index.append({"name": key, "offset": offset, "shape": list(tensor.shape),
                      "dtype": str(tensor.dtype).replace("torch.", "")})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    (out_dir / f"{name}.bin").write_bytes(blob)
    doc = {
        "format": 1,
        "architecture": model.config.to_dict(),
        "num_heading_bins": model.config.num_heading_bins,
        "num_size_templates": model.config.num_sizes,
        "feature_stats": asdict(model.stats),
        "metrics": metrics or {},
        "blob": f"{name}.bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": index,
    }
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> RadarPointNet:
    path = Path(path)
    doc = json.loads(path.read_text())
    config = ModelConfig.from_dict(doc["architecture"])
    if expected is not None and expected != config:
        raise ArchitectureMismatchError(f"checkpoint architecture {config} differs from {expected}")
    model = RadarPointNet(config, FeatureStats(**doc["feature_stats"]))
    blob = (path.parent / doc["blob"]).read_bytes()
    state = model.state_dict()
    names = {e["name"] for e in doc["tensors"]}
    if names != set(state):
        raise ArchitectureMismatchError(
            f"tensor names differ: missing {sorted(set(state) - names)}, extra {sorted(names - set(state))}")
    loaded = {}
    for entry in doc["tensors"]:
        ref = state[entry["name"]]
        if list(ref.shape) != entry["shape"]:
            raise ArchitectureMismatchError(
                f"{entry['name']}: checkpoint shape {entry['shape']} vs model {list(ref.shape)}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        loaded[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(ref.dtype)
    model.load_state_dict(loaded)
    model.eval()
    return model
