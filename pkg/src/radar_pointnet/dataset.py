"""On-disk dataset: ``manifest.json`` plus ``<split>/frames.jsonl`` per split.

Frames are stored before patch proposal; patches are rebuilt on load.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Union

from radar_pointnet.core_types import EgoState, OrientedBox2D, RadarFrame
from radar_pointnet.patches import DatasetSplit, split_dataset

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, path: Union[str, Path], message: str, line: Optional[int] = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class UnsupportedVersionError(DatasetFormatError):
    pass


def frame_to_record(frame: RadarFrame) -> Dict:
    return {
        "frame_id": frame.frame_id,
        "maneuver_id": frame.maneuver_id,
        "ego": {
            "vx": frame.ego.vx,
            "yaw_rate": frame.ego.yaw_rate,
            "sensor_offset": list(frame.ego.sensor_offset),
        },
        "targets": [list(t.as_tuple()) for t in frame.targets],
        "gt_box": None if frame.gt_box is None else list(frame.gt_box.as_tuple()),
        "point_labels": None if frame.point_labels is None else list(frame.point_labels),
    }


def record_to_frame(rec: Mapping) -> RadarFrame:
    ego = rec["ego"]
    gt = rec["gt_box"]
    return RadarFrame.from_arrays(
        frame_id=int(rec["frame_id"]),
        maneuver_id=str(rec["maneuver_id"]),
        targets=rec["targets"],
        ego=EgoState(float(ego["vx"]), float(ego["yaw_rate"]),
                     tuple(float(v) for v in ego["sensor_offset"])),
        gt_box=None if gt is None else OrientedBox2D(*map(float, gt)),
        point_labels=rec["point_labels"],
    )


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_frames(path: Union[str, Path], frames: Iterable[RadarFrame]) -> str:
    """Write one JSON record per line; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = "".join(_dumps(frame_to_record(f)) + "\n" for f in frames).encode()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_frames(path: Union[str, Path]) -> List[RadarFrame]:
    path = Path(path)
    text = path.read_text()
    if text and not text.endswith("\n"):
        raise DatasetFormatError(path, "truncated record (missing final newline)",
                                 text.count("\n") + 1)
    frames = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            frames.append(record_to_frame(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(path, f"bad frame record: {exc}", lineno) from exc
    return frames


def write_dataset(out_dir: Union[str, Path], frames_by_split: Mapping[str, Iterable[RadarFrame]],
                  manifest: Mapping[str, str], extra: Optional[Mapping] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in SPLITS:
        frames = list(frames_by_split.get(split, []))
        digest = write_frames(out_dir / split / "frames.jsonl", frames)
        files[split] = {"path": f"{split}/frames.jsonl", "frames": len(frames), "sha256": digest}
    doc = {"version": FORMAT_VERSION, "splits": dict(sorted(manifest.items())), "files": files}
    doc.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir


def read_manifest(path: Union[str, Path]) -> Dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(path, f"invalid JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise DatasetFormatError(path, "manifest lacks a version field")
    if doc["version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            path, f"unsupported dataset version {doc['version']!r} (expected {FORMAT_VERSION})")
    for key in ("splits", "files"):
        if key not in doc:
            raise DatasetFormatError(path, f"manifest lacks {key!r}")
    return doc


def read_dataset(root: Union[str, Path], materialize: bool = True) -> DatasetSplit:
    """Load a dataset directory and rebuild the valid patches of each split."""
    root = Path(root)
    doc = read_manifest(root / "manifest.json")
    frames: Dict[str, List[RadarFrame]] = {}
    for split in SPLITS:
        info = doc["files"].get(split)
        if info is None:
            raise DatasetFormatError(root / "manifest.json", f"no file entry for split {split!r}")
        path = root / info["path"]
        raw = path.read_bytes()
        if hashlib.sha256(raw).hexdigest() != info["sha256"]:
            frames_read = read_frames(path)  # surfaces the offending line if malformed
            raise DatasetFormatError(
                path, f"content does not match manifest checksum ({len(frames_read)} of "
                      f"{info['frames']} frames readable)")
        frames[split] = read_frames(path)
        if len(frames[split]) != info["frames"]:
            raise DatasetFormatError(path, f"expected {info['frames']} frames, found {len(frames[split])}")
    patch_cfg = doc.get("patch", {})
    meta = {k: v for k, v in doc.items() if k not in ("splits", "files")}
    if not materialize:
        return DatasetSplit(frames=frames, manifest=doc["splits"], meta=meta)
    all_frames = [f for split in SPLITS for f in frames[split]]
    return split_dataset(
        all_frames, doc["splits"],
        patch_size=patch_cfg.get("patch_size", 10.0),
        min_car=patch_cfg.get("min_car", 2),
        min_clutter=patch_cfg.get("min_clutter", 16),
        meta=meta,
    )
