"""Command-line entry point ``rpd``.

Subcommands: generate, train, eval, detect, render.

Exit codes:
    0  success
    2  configuration or usage error
    3  I/O or dataset format error
    4  training aborted on a non-finite loss
    5  checkpoint architecture mismatch
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from radar_pointnet import __version__
from radar_pointnet.config import ConfigError, RunConfig, load_config
from radar_pointnet.core_types import CAR, RadarFrame
from radar_pointnet.dataset import DatasetFormatError, read_dataset, write_dataset
from radar_pointnet.evaluation import evaluate, model_detector, oracle_detector
from radar_pointnet.model import FeatureStats, RadarPointNet, detect_patches
from radar_pointnet.patches import assign_splits, feature_stats, frame_patches, maneuver_kind, sample_points
from radar_pointnet.sim import ManeuverSpec, generate_maneuver
from radar_pointnet.training import (
    ArchitectureMismatchError,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_ARCH = 5

log = logging.getLogger("radar_pointnet")


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("RPD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _jobs(args: argparse.Namespace) -> int:
    return args.jobs if getattr(args, "jobs", None) else (os.cpu_count() or 1)


def write_run_info(out_dir: Path, command: str, cfg: RunConfig, extra: Optional[Dict] = None) -> Path:
    """Reproducibility stanza: config hash, seeds and library versions."""
    import matplotlib

    info = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "versions": {
            "radar_pointnet": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "config": cfg.to_dict(),
    }
    info.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_info.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return path


def _simulate(job) -> List[RadarFrame]:
    spec, cfg = job
    return generate_maneuver(spec, cfg.reflection, cfg.sensor, label=True,
                             label_growth=cfg.patch.label_growth)


def generate_frames(cfg: RunConfig, jobs: int = 1) -> List[RadarFrame]:
    specs: List[ManeuverSpec] = cfg.maneuver_specs()
    work = [(s, cfg) for s in specs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_simulate, work))
    else:
        chunks = [_simulate(w) for w in work]
    return [f for chunk in chunks for f in chunk]


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or cfg.paths.dataset or "dataset")
    frames = generate_frames(cfg, _jobs(args))
    ids = sorted({f.maneuver_id for f in frames})
    manifest = assign_splits(ids, cfg.split.test_kinds, cfg.split.ratios, seed=cfg.seed)
    by_split: Dict[str, List[RadarFrame]] = {"train": [], "val": [], "test": []}
    for f in frames:
        by_split[manifest[f.maneuver_id]].append(f)
    patch_meta = {"patch_size": cfg.patch.patch_size, "min_car": cfg.patch.min_car_points,
                  "min_clutter": cfg.patch.min_clutter_points, "label_growth": cfg.patch.label_growth}
    write_dataset(out, by_split, manifest, extra={
        "patch": patch_meta, "seed": cfg.seed, "config_sha256": cfg.digest(),
        "generator": {"reflection": cfg.to_dict()["reflection"], "sensor": cfg.to_dict()["sensor"]},
        "feature_stats": feature_stats(by_split["train"]),
    })
    split = read_dataset(out)
    shares = split.shares()
    print(f"dataset: {out}")
    for name in ("train", "val", "test"):
        patches = split.patches(name)
        n_car = sum(p.patch_label == CAR for p in patches)
        print(f"{name:5s} frames {len(by_split[name]):5d}  patches {len(patches):6d}  "
              f"car {n_car:5d}  clutter {len(patches) - n_car:6d}  share {shares[name]:5.1f}%")
    print(f"car patch fraction: {split.car_fraction():.3f}")
    write_run_info(out, "generate", cfg)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    dataset = Path(args.dataset or cfg.paths.dataset or "dataset")
    out = Path(args.out or cfg.paths.out or "run")
    torch.set_num_threads(max(1, args.jobs or 1))
    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    split = read_dataset(dataset)
    if not split.train:
        raise UsageError(f"dataset {dataset} has no training patches")
    stats = FeatureStats(**split.meta.get("feature_stats", feature_stats(split.frames["train"])))
    torch.manual_seed(train_cfg.seed)
    model = RadarPointNet(cfg.model, stats)

    def report(epoch: int, summary: Dict[str, float]) -> None:
        log.info("epoch %d %s", epoch, json.dumps(summary, sort_keys=True))

    result = train(model, split.train, train_cfg, cfg.loss, val_patches=split.val,
                   augmentation=cfg.augment, dump_dir=out / "nan_dump", on_epoch=report)
    out.mkdir(parents=True, exist_ok=True)
    final = save_checkpoint(model, out, {"final_loss": result.final_loss}, name="final")
    model.load_state_dict(result.best_state)
    best = save_checkpoint(model, out, {"best_epoch": result.best_epoch,
                                        "best_score": result.best_score}, name="best")
    write_loss_csv(out / "loss.csv", result.history)
    (out / "val_history.json").write_text(json.dumps(result.val_history, indent=2) + "\n")
    write_run_info(out, "train", replace(cfg, train=train_cfg),
                   {"dataset": str(dataset), "final_loss": result.final_loss})
    print(f"best checkpoint: {best}")
    print(f"final checkpoint: {final}")
    print(f"loss history: {out / 'loss.csv'}")
    print(f"final loss: {result.final_loss:.6f}")
    return EXIT_OK


def _load_model(args: argparse.Namespace) -> RadarPointNet:
    expected = load_config(args.config).model if args.config else None
    return load_checkpoint(args.checkpoint, expected)


def _filter_frames(frames: Sequence[RadarFrame], kind: Optional[str]) -> List[RadarFrame]:
    if kind is None:
        return list(frames)
    kept = [f for f in frames if maneuver_kind(f.maneuver_id) == kind]
    if not kept:
        raise UsageError(f"no frames of maneuver kind {kind!r} in the selected split")
    return kept


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --oracle")
    torch.set_num_threads(max(1, _jobs(args)))
    split = read_dataset(args.dataset, materialize=False)
    frames = _filter_frames(split.frames[args.split], args.maneuver)
    detector = oracle_detector if args.oracle else model_detector(_load_model(args))
    report = evaluate(detector, frames, per_maneuver=True, seed=args.seed or 0)
    out = Path(args.out) if args.out else (Path(args.checkpoint).parent if args.checkpoint else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    print(report.format_table())
    cfg = load_config(args.config)
    write_run_info(out, "eval", cfg if args.seed is None else cfg.with_seed(args.seed),
                   {"checkpoint": args.checkpoint, "oracle": args.oracle, "dataset": str(args.dataset)})
    return EXIT_OK


def _select_frame(args: argparse.Namespace) -> RadarFrame:
    split = read_dataset(args.dataset, materialize=False)
    frames = _filter_frames(split.frames[args.split], args.maneuver)
    if not 0 <= args.frame < len(frames):
        raise UsageError(f"frame index {args.frame} outside 0..{len(frames) - 1}")
    return frames[args.frame]


def detect_frame(model: RadarPointNet, frame: RadarFrame, seed: int = 0):
    """Per-patch detections for one frame, test-mode sampling."""
    rng = np.random.default_rng(seed)
    patches = [sample_points(p, rng, model.config.num_points, "test") for p in frame_patches(frame)]
    return patches, detect_patches(model, patches, rng)


def cmd_detect(args: argparse.Namespace) -> int:
    model = _load_model(args)
    frame = _select_frame(args)
    patches, dets = detect_frame(model, frame, args.seed or 0)
    rows = []
    for p, d in zip(patches, dets):
        if d.box is None:
            continue
        rows.append({"anchor_index": p.anchor_index, "segmented_points": d.m_segmented,
                     "box": dict(zip(("xc", "yc", "theta", "length", "width"), d.box.as_tuple()))})
    print(json.dumps({"maneuver_id": frame.maneuver_id, "frame_id": frame.frame_id,
                      "patches": len(patches), "car_detections": rows}, indent=2))
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    from radar_pointnet.render import render_frame

    frame = _select_frame(args)
    box = None
    if args.checkpoint:
        model = _load_model(args)
        _, dets = detect_frame(model, frame, args.seed or 0)
        scored = [(float(d.patch_class_logits[CAR] - d.patch_class_logits[1 - CAR]), i)
                  for i, d in enumerate(dets) if d.box is not None]
        if scored:
            box = dets[max(scored)[1]].box
    path = render_frame(frame, args.out or "frame.png", predicted_box=box)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpd", description="Radar point cloud car detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=True):
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--seed", type=int, help="master seed")
        if jobs:
            p.add_argument("--jobs", type=int, help="parallel workers (default: available cores)")
        p.add_argument("--out", help="output path")

    p = sub.add_parser("generate", help="simulate maneuvers and write a labeled dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on raw frames and write eval_report.json")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="checkpoint .json written by train")
    p.add_argument("--oracle", action="store_true", help="ground-truth detector (harness self-test)")
    p.add_argument("--maneuver", help="restrict to one maneuver kind")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    for name, fn, help_text in (("detect", cmd_detect, "detect cars in one frame"),
                                ("render", cmd_render, "draw one frame to a PNG")):
        p = sub.add_parser(name, help=help_text)
        common(p, jobs=False)
        p.add_argument("--dataset", required=True)
        p.add_argument("--checkpoint", required=name == "detect")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--maneuver", help="maneuver kind to pick the frame from")
        p.add_argument("--frame", type=int, default=0, help="frame index within the selection")
        p.set_defaults(func=fn)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}; batch dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArchitectureMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARCH
    except (DatasetFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
