"""Acceptance gate.

Every check records one PASS/FAIL line that is printed at the end of the
pytest run, then asserts. Tolerances and budgets are pinned as constants below.
"""
import copy
import json
import math
import time

import numpy as np
import pytest
import torch

from radar_pointnet.cli import EXIT_OK, main
from radar_pointnet.core_types import CAR, CLUTTER, OrientedBox2D, RadarFrame, RadarTarget
from radar_pointnet.dataset import read_dataset
from radar_pointnet.evaluation import (
    Confusion,
    DetectionOutput,
    evaluate,
    evaluate_patches,
    f1_score,
    model_detector,
    oracle_detector,
)
from radar_pointnet.loss import BOX_TERMS
from radar_pointnet.geometry import SizeTemplateTable, box_corners, decode_box, encode_box, iou
from radar_pointnet.model import (
    FeatureStats,
    ModelConfig,
    RadarPointNet,
    detect_patches,
    mask_and_normalize,
    normalized_object_points,
    one_hot_class,
)
from radar_pointnet.patches import feature_stats, filter_valid, frame_patches, sample_points
from radar_pointnet.sim import ManeuverSpec, auto_label, generate_maneuver
from radar_pointnet.training import TrainConfig, batch_loss, collate, train

from acceptance_log import record
from builders import float64_model, loss_closure, random_batch
from oracles import central_difference_gradients, monte_carlo_iou, random_box_pairs, relative_error

IOU_TOL, IOU_BUDGET_S, IOU_PAIRS, IOU_SAMPLES = 2e-3, 60.0, 100, 1_000_000
GRAD_TOL, GRAD_STEP, GRAD_INSTANCES, GRAD_BUDGET_S = 1e-4, 1e-5, 10, 600.0
ROUND_TRIP_TOL, ROUND_TRIP_BOXES = 1e-6, 1000
PERMUTATION_TOL, VIEW_ROTATION_TOL, DETECTION_ROTATION_TOL = 1e-6, 1e-6, 1e-4
OVERFIT_PATCHES, OVERFIT_EPOCHS, OVERFIT_BUDGET_S = 32, 200, 600.0
OVERFIT_MIN_SEG_ACCURACY, OVERFIT_MIN_MIOU = 0.99, 0.9
# 200 epochs of a 32-patch set are only 200 steps at batch 32; smaller batches
# and a larger step size give memorization a fair chance across seeds
OVERFIT_LR, OVERFIT_BATCH = 1e-3, 16
DESK_MIN_SEG_F1, DESK_MIN_IOU_RATIO, DESK_BUDGET_S = 0.80, 0.50, 30 * 60.0
LABEL_MARGIN, LABEL_EPS = 0.175, 1e-6
LOSS_REPEAT_TOL = 1e-6

pytestmark = pytest.mark.acceptance


def test_iou_matches_monte_carlo():
    start = time.perf_counter()
    worst = 0.0
    for i, (a, b) in enumerate(random_box_pairs(IOU_PAIRS, seed=2024)):
        exact = iou(OrientedBox2D(*a), OrientedBox2D(*b))
        worst = max(worst, abs(exact - monte_carlo_iou(a, b, IOU_SAMPLES, seed=i)))
    elapsed = time.perf_counter() - start
    record("1 IoU vs Monte Carlo", worst <= IOU_TOL and elapsed < IOU_BUDGET_S,
           f"max |diff| {worst:.2e} (tol {IOU_TOL:g}), {elapsed:.1f} s (budget {IOU_BUDGET_S:g} s)")


def test_loss_gradients_match_finite_differences():
    start = time.perf_counter()
    worst = 0.0
    for i in range(GRAD_INSTANCES):
        model = float64_model(100 + i)
        f = loss_closure(model, random_batch(200 + i, 6, 12), seed=i)
        model.zero_grad()
        f().backward()
        params = list(model.parameters())
        analytic = [p.grad.detach().clone() for p in params]
        numeric = central_difference_gradients(f, params, step=GRAD_STEP)
        worst = max(worst, max(relative_error(a, n) for a, n in zip(analytic, numeric)))
    elapsed = time.perf_counter() - start
    record("2 gradient check", worst <= GRAD_TOL and elapsed < GRAD_BUDGET_S,
           f"max relative error {worst:.2e} over {GRAD_INSTANCES} instances (tol {GRAD_TOL:g}), "
           f"{elapsed:.1f} s (budget {GRAD_BUDGET_S:g} s)")


def test_encode_decode_round_trip():
    rng = np.random.default_rng(7)
    templates = SizeTemplateTable()
    worst = 0.0
    for _ in range(ROUND_TRIP_BOXES):
        box = OrientedBox2D(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-math.pi, math.pi),
                            rng.uniform(3.0, 6.0), rng.uniform(1.4, 2.2))
        origin = box.xc + rng.normal(0, 2), box.yc + rng.normal(0, 2)
        back = decode_box(encode_box(box, origin, templates), origin, templates)
        worst = max(worst, float(np.max(np.abs(box_corners(back) - box_corners(box)))))
    record("3 encode/decode round trip", worst <= ROUND_TRIP_TOL,
           f"max corner error {worst:.2e} m over {ROUND_TRIP_BOXES} boxes (tol {ROUND_TRIP_TOL:g})")


def _rotate_frame(frame, phi):
    c, s = math.cos(phi), math.sin(phi)
    targets = [RadarTarget(c * t.x - s * t.y, s * t.x + c * t.y, t.v_r, t.rcs) for t in frame.targets]
    box = frame.gt_box.transformed(phi) if frame.gt_box is not None else None
    return RadarFrame(frame.frame_id, frame.maneuver_id, targets, frame.ego, box, frame.point_labels)


@pytest.fixture(scope="module")
def symmetry_model():
    m = float64_model(0)
    with torch.no_grad():
        for seed in range(3):
            feats = torch.randn(16, 12, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
            m.forward_cls_seg(feats)
            m.forward_box(feats[:, :6], one_hot_class(torch.ones(16, dtype=torch.long), torch.float64))
    m.eval()
    return m


class TestSymmetry:
    def test_permutation(self, symmetry_model):
        gen = torch.Generator().manual_seed(1)
        feats = torch.randn(8, 12, 4, dtype=torch.float64, generator=gen)
        onehot = one_hot_class(torch.ones(8, dtype=torch.long), torch.float64)
        worst = 0.0
        with torch.no_grad():
            cls_a, seg_a = symmetry_model.forward_cls_seg(feats)
            box_a = symmetry_model.forward_box(feats[:, :6], onehot)["raw"]
            for _ in range(10):
                perm = torch.randperm(12, generator=gen)
                cls_b, seg_b = symmetry_model.forward_cls_seg(feats[:, perm])
                box_perm = torch.randperm(6, generator=gen)
                box_b = symmetry_model.forward_box(feats[:, :6][:, box_perm], onehot)["raw"]
                worst = max(worst, float((cls_a - cls_b).abs().max()), float((seg_a[:, perm] - seg_b).abs().max()),
                            float((box_a - box_b).abs().max()))
        record("4a permutation invariance/equivariance", worst <= PERMUTATION_TOL,
               f"max deviation {worst:.2e} (tol {PERMUTATION_TOL:g})")

    def test_center_view_rotation(self):
        frames = generate_maneuver(ManeuverSpec("random_drive", duration=3.0, cycle_period=1.0, seed=9))
        worst, count = 0.0, 0
        for frame in frames:
            ref = frame_patches(frame)
            for phi in np.linspace(-math.pi, math.pi, 9):
                for pa, pb in zip(ref, frame_patches(_rotate_frame(frame, float(phi)))):
                    worst = max(worst, float(np.max(np.abs(pa.points - pb.points))))
                    count += 1
        record("4b center-view rotation invariance", worst <= VIEW_ROTATION_TOL,
               f"max point deviation {worst:.2e} over {count} patches (tol {VIEW_ROTATION_TOL:g})")

    def test_detection_rotation_covariance(self, symmetry_model):
        model = copy.deepcopy(symmetry_model)
        # bias both heads towards car so that every patch reaches the box stage
        with torch.no_grad():
            model.cls_out.bias[CAR] += 10.0
            model.seg_out.bias[CAR] += 10.0
        frames = generate_maneuver(ManeuverSpec("figure_eight", duration=3.0, cycle_period=1.0, seed=6))
        worst, count, same_gate = 0.0, 0, True
        for frame in frames:
            for phi in (0.7, -2.1, 3.0):
                rotated = _rotate_frame(frame, phi)
                a = [sample_points(p, np.random.default_rng(k), 12, "test") for k, p in enumerate(frame_patches(frame))]
                b = [sample_points(p, np.random.default_rng(k), 12, "test")
                     for k, p in enumerate(frame_patches(rotated))]
                for da, db in zip(detect_patches(model, a, np.random.default_rng(0)),
                                  detect_patches(model, b, np.random.default_rng(0))):
                    same_gate &= (da.box is None) == (db.box is None)
                    if da.box is not None and db.box is not None:
                        expected = box_corners(da.box.transformed(phi))
                        worst = max(worst, float(np.max(np.abs(box_corners(db.box) - expected))))
                        count += 1
        record("4c detection rotation covariance", same_gate and count > 0 and worst <= DETECTION_ROTATION_TOL,
               f"max corner error {worst:.2e} m over {count} boxes (tol {DETECTION_ROTATION_TOL:g})")

    def test_box_input_translation(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(20):
            pts = np.column_stack([rng.uniform(10, 20, (16, 2)), rng.normal(size=(16, 2))])
            logits = rng.normal(size=(16, 2))
            logits[0] = (0.0, 5.0)
            shifted = pts.copy()
            shifted[:, :2] += rng.uniform(-30, 30, 2)
            outs = []
            for p in (pts, shifted):
                mask, centroid = mask_and_normalize(p, logits)
                outs.append(normalized_object_points(p, np.flatnonzero(mask), centroid))
            worst = max(worst, float(np.max(np.abs(outs[0] - outs[1]))))
        record("4d box-input translation invariance", worst <= PERMUTATION_TOL,
               f"max deviation {worst:.2e} (tol {PERMUTATION_TOL:g})")


def test_clutter_samples_give_zero_box_gradients():
    box_params = lambda m: [(n, p) for n, p in m.named_parameters() if n.startswith(("tnet_", "box_"))]
    nonzero = 0
    # clutter-only batches: the whole loss must leave the box head untouched
    for seed in range(5):
        model = float64_model(30 + seed)
        batch = collate(random_batch(40 + seed, 8, 12, car_fraction=0.0)[1:], model, torch.float64)
        model.zero_grad()
        batch_loss(model, batch, np.random.default_rng(seed)).total.backward()
        nonzero += sum(int(torch.count_nonzero(p.grad)) for _, p in box_params(model) if p.grad is not None)
    # mixed batches: the clutter rows of the loss alone
    for seed in range(5):
        model = float64_model(50 + seed)
        batch = collate(random_batch(60 + seed, 8, 12, car_fraction=0.5), model, torch.float64)
        loss = batch_loss(model, batch, np.random.default_rng(seed))
        clutter = batch.patch_label == CLUTTER
        w = loss.sample_weights
        box_part = sum(loss.per_sample[t] for t in BOX_TERMS if t != "corner") + 10.0 * loss.per_sample["corner"]
        per = w["cls"] * loss.per_sample["cls"] + w["seg"] * loss.per_sample["seg"] + w["box"] * box_part
        params = [p for _, p in box_params(model)]
        grads = torch.autograd.grad(per[clutter].sum(), params, allow_unused=True)
        nonzero += sum(int(torch.count_nonzero(g)) for g in grads if g is not None)
    record("5 loss gating", nonzero == 0, f"{nonzero} non-zero box-head gradient entries from clutter samples")


def test_overfit_small_set():
    frames = generate_maneuver(ManeuverSpec("circle", duration=4.0, cycle_period=1.0, seed=3))
    patches = filter_valid([p for f in frames for p in frame_patches(f)])
    half = OVERFIT_PATCHES // 2
    toy = [p for p in patches if p.patch_label == CAR][:half] + [p for p in patches if p.patch_label == CLUTTER][:half]
    assert len(toy) == OVERFIT_PATCHES
    torch.manual_seed(0)
    model = RadarPointNet(ModelConfig(), FeatureStats(**feature_stats(frames)))
    start = time.perf_counter()
    train(model, toy, TrainConfig(lr=OVERFIT_LR, batch_size=OVERFIT_BATCH, epochs=OVERFIT_EPOCHS, validate=False))
    elapsed = time.perf_counter() - start
    m = evaluate_patches(model_detector(model), toy, seed=0)
    passed = m.seg_accuracy >= OVERFIT_MIN_SEG_ACCURACY and m.miou >= OVERFIT_MIN_MIOU and elapsed < OVERFIT_BUDGET_S
    record("6 overfit sanity", passed,
           f"seg accuracy {m.seg_accuracy:.4f} (min {OVERFIT_MIN_SEG_ACCURACY}), mIoU {m.miou:.3f} "
           f"(min {OVERFIT_MIN_MIOU}), {elapsed:.1f} s (budget {OVERFIT_BUDGET_S:g} s)")


def _dataset_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_info.json"}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Default configuration through the command line: generate, train, evaluate on test."""
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    assert main(["generate", "--seed", "0", "--jobs", "1", "--out", str(root / "ds")]) == EXIT_OK
    assert main(["train", "--seed", "0", "--jobs", "1", "--dataset", str(root / "ds"),
                 "--out", str(root / "run")]) == EXIT_OK
    assert main(["eval", "--dataset", str(root / "ds"), "--checkpoint", str(root / "run" / "best.json"),
                 "--out", str(root / "eval")]) == EXIT_OK
    elapsed = time.perf_counter() - start
    return root, elapsed


def test_desk_scale_end_to_end(desk_run):
    root, elapsed = desk_run
    overall = json.loads((root / "eval" / "eval_report.json").read_text())["overall"]
    passed = (overall["seg_f1"] >= DESK_MIN_SEG_F1 and overall["iou_at_0_7"] >= DESK_MIN_IOU_RATIO
              and elapsed <= DESK_BUDGET_S)
    record("7 desk-scale end to end", passed,
           f"test seg F1 {overall['seg_f1']:.4f} (min {DESK_MIN_SEG_F1}), IoU>=0.7 ratio "
           f"{overall['iou_at_0_7']:.4f} (min {DESK_MIN_IOU_RATIO}), mIoU {overall['miou']:.3f}, "
           f"{elapsed:.0f} s (budget {DESK_BUDGET_S:g} s)")


def _always_clutter(patches, rng):
    return [DetectionOutput(np.array([1.0, 0.0]), np.tile([1.0, 0.0], (len(p.points), 1)),
                            np.zeros(len(p.points), dtype=bool), None, None, 0) for p in patches]


def test_metrics(desk_run):
    problems = []
    if f1_score(1, 1, 0) != pytest.approx(2 / 3):
        problems.append("P=0.5,R=1")
    if f1_score(0, 4, 2) != 0.0:
        problems.append("tp=0")
    rng = np.random.default_rng(0)
    truth, pred = rng.random(1000) < 0.3, rng.random(1000) < 0.4
    c = Confusion()
    for lo in range(0, 1000, 128):
        c.add(truth[lo:lo + 128], pred[lo:lo + 128])
    if c.accuracy != pytest.approx(np.mean(truth == pred)):
        problems.append("accuracy recount")

    root, _ = desk_run
    scopes = []
    doc = json.loads((root / "eval" / "eval_report.json").read_text())
    scopes += [doc["overall"], *doc["per_maneuver"].values()]
    scopes += json.loads((root / "run" / "val_history.json").read_text())
    test_frames = read_dataset(root / "ds", materialize=False).frames["test"]
    for detector in (oracle_detector, _always_clutter):
        report = json.loads(evaluate(detector, test_frames).to_json())
        scopes += [report["overall"], *report["per_maneuver"].values()]
    bad = [s for s in scopes if s["miou"] < 0.7 * s["iou_at_0_7"] - 1e-12]
    if bad:
        problems.append(f"{len(bad)} scopes violate mIoU >= 0.7 * ratio")
    record("8 metric checks", not problems,
           f"F1 cases, accuracy recount, consistency bound over {len(scopes)} report scopes"
           + (f"; failed: {', '.join(problems)}" if problems else ""))


def test_labeling_boundary():
    frame_of = lambda pts, box: RadarFrame(0, "fixture-00", [RadarTarget(x, y, 0.0, 0.0) for x, y in pts],
                                           gt_box=box)
    cases = []
    for theta in (0.0, 0.4, -2.0):
        box = OrientedBox2D(25.0, -3.0, theta, 4.6, 1.8)
        c, s = math.cos(theta), math.sin(theta)
        for half, axis in ((2.3, (c, s)), (0.9, (-s, c))):
            for sign in (1.0, -1.0):
                for offset, label in ((LABEL_MARGIN - LABEL_EPS, CAR), (LABEL_MARGIN + LABEL_EPS, CLUTTER)):
                    d = sign * (half + offset)
                    cases.append(((box.xc + d * axis[0], box.yc + d * axis[1]), box, label))
        cases.append(((box.xc, box.yc), box, CAR))
        cases.append(((box.xc + 10.0, box.yc + 10.0), box, CLUTTER))
    wrong = sum(auto_label(frame_of([p], box)).point_labels != (label,) for p, box, label in cases)
    record("9 labeling rule", wrong == 0,
           f"{len(cases) - wrong}/{len(cases)} fixtures, boundary margin {LABEL_MARGIN} m +- {LABEL_EPS:g} m")


def test_determinism(desk_run, tmp_path):
    root, _ = desk_run
    assert main(["generate", "--seed", "0", "--jobs", "1", "--out", str(tmp_path / "ds")]) == EXIT_OK
    same_bytes = _dataset_files(root / "ds") == _dataset_files(tmp_path / "ds")
    assert main(["train", "--seed", "0", "--jobs", "1", "--dataset", str(root / "ds"),
                 "--out", str(tmp_path / "run")]) == EXIT_OK
    a = json.loads((root / "run" / "run_info.json").read_text())["final_loss"]
    b = json.loads((tmp_path / "run" / "run_info.json").read_text())["final_loss"]
    record("10 determinism", same_bytes and abs(a - b) <= LOSS_REPEAT_TOL,
           f"dataset files {'identical' if same_bytes else 'differ'}, final losses {a:.9f} / {b:.9f} "
           f"(tol {LOSS_REPEAT_TOL:g})")
