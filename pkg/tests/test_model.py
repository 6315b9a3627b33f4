import copy
import math

import numpy as np
import pytest
import torch

from radar_pointnet.core_types import CAR, OrientedBox2D
from radar_pointnet.geometry import SizeTemplateTable, box_corners, encode_box
from radar_pointnet.model import (
    DetectionOutput,
    FeatureStats,
    RadarPointNet,
    assemble_detection,
    decode_raw_box,
    detect_patches,
    mask_and_normalize,
    normalized_object_points,
    one_hot_class,
    select_box_points,
)
from radar_pointnet.training import ArchitectureMismatchError, load_checkpoint, save_checkpoint

from builders import float64_model, random_batch, synthetic_patch, tiny_config


@pytest.fixture(scope="module")
def model():
    m = float64_model(0)
    # a few training-mode passes give the batch norms non-trivial running stats
    with torch.no_grad():
        for seed in range(3):
            feats = torch.randn(16, 12, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
            m.forward_cls_seg(feats)
            m.forward_box(feats[:, :6], one_hot_class(torch.ones(16, dtype=torch.long), torch.float64))
    m.eval()
    return m


def _feats(seed, b=4, n=12):
    return torch.randn(b, n, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


class TestPermutation:
    def test_cls_invariant_seg_equivariant(self, model):
        feats = _feats(1)
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            cls_a, seg_a = model.forward_cls_seg(feats)
            cls_b, seg_b = model.forward_cls_seg(feats[:, perm])
        assert torch.max(torch.abs(cls_a - cls_b)) <= 1e-6
        assert torch.max(torch.abs(seg_a[:, perm] - seg_b)) <= 1e-6

    def test_duplicated_point_rows_identical(self, model):
        feats = _feats(3)
        feats[:, 5] = feats[:, 2]
        with torch.no_grad():
            _, seg = model.forward_cls_seg(feats)
        assert torch.equal(seg[:, 5], seg[:, 2])

    def test_box_net_permutation_invariant(self, model):
        obj = _feats(4, n=6)
        onehot = one_hot_class(torch.ones(4, dtype=torch.long), torch.float64)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        with torch.no_grad():
            a = model.forward_box(obj, onehot)["raw"]
            b = model.forward_box(obj[:, perm], onehot)["raw"]
        assert torch.max(torch.abs(a - b)) <= 1e-6

    def test_single_point_replicated_is_finite(self, model):
        obj = torch.zeros(1, 6, 4, dtype=torch.float64)
        obj[..., 2:] = torch.tensor([3.0, 5.0], dtype=torch.float64)
        with torch.no_grad():
            out = model.forward_box(obj, one_hot_class(torch.ones(1, dtype=torch.long), torch.float64))
        assert torch.isfinite(out["raw"]).all()


def test_non_finite_input_rejected(model):
    feats = _feats(5)
    feats[0, 3, 1] = float("nan")
    with pytest.raises(ValueError):
        model.forward_cls_seg(feats)


def test_batch_of_one_in_train_mode():
    m = float64_model(1)
    cls, seg = m.forward_cls_seg(_feats(6, b=1))
    assert cls.shape == (1, 2) and seg.shape == (1, 12, 2)


def test_output_shapes(model):
    cfg = model.config
    with torch.no_grad():
        out = model(_feats(7), _feats(8, n=6), torch.arange(4))
    assert out["cls_logits"].shape == (4, 2)
    assert out["seg_logits"].shape == (4, 12, 2)
    box = out["box"]
    assert box["heading_scores"].shape == (4, cfg.num_heading_bins)
    assert box["size_res"].shape == (4, cfg.num_sizes, 2)
    assert box["raw"].shape == (4, 2 + cfg.box_output_dim)


class TestMaskAndNormalize:
    points = np.array([[10.0, 1.0, 0, 0], [12.0, -1.0, 0, 0], [11.0, 3.0, 0, 0], [30.0, 0.0, 0, 0]])

    def test_all_selected_centroid(self):
        logits = np.tile([0.0, 1.0], (4, 1))
        mask, centroid = mask_and_normalize(self.points, logits)
        assert mask.all()
        obj = normalized_object_points(self.points, np.arange(4), centroid)
        np.testing.assert_allclose(obj[:, :2].mean(axis=0), 0.0, atol=1e-12)

    def test_three_selected(self):
        logits = np.array([[0.0, 2.0], [0.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
        mask, centroid = mask_and_normalize(self.points, logits)
        assert mask.sum() == 3
        np.testing.assert_allclose(centroid, [11.0, 1.0])
        rows = select_box_points(mask, np.random.default_rng(0), 6)
        assert len(rows) == 6 and set(rows) == {0, 1, 2}

    def test_none_selected(self):
        mask, centroid = mask_and_normalize(self.points, np.tile([1.0, 0.0], (4, 1)))
        assert not mask.any() and centroid is None
        with pytest.raises(ValueError):
            select_box_points(mask, np.random.default_rng(0))

    def test_threshold_uses_probability(self):
        logits = np.array([[0.0, 0.5], [0.0, 2.0], [0.0, -1.0], [0.0, 0.1]])
        mask, _ = mask_and_normalize(self.points, logits, threshold=0.8)
        np.testing.assert_array_equal(mask, [False, True, False, False])

    def test_translation_invariance(self):
        logits = np.array([[0.0, 2.0], [0.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
        shifted = self.points.copy()
        shifted[:, :2] += (7.5, -3.25)
        for pts in (self.points, shifted):
            mask, centroid = mask_and_normalize(pts, logits)
            obj = normalized_object_points(pts, np.flatnonzero(mask), centroid)
            if pts is self.points:
                ref = obj
        np.testing.assert_allclose(obj, ref, atol=1e-12)


def _raw_from_encoding(enc, nh, ns):
    heading_scores = np.zeros(nh)
    heading_scores[enc.heading_bin] = 5.0
    heading_res = np.zeros(nh)
    heading_res[enc.heading_bin] = enc.heading_residual
    size_scores = np.zeros(ns)
    size_scores[enc.size_template] = 5.0
    size_res = np.zeros((ns, 2))
    size_res[enc.size_template] = enc.size_residual
    return {"center": np.asarray(enc.center_delta), "heading_scores": heading_scores,
            "heading_res": heading_res, "size_scores": size_scores, "size_res": size_res}


def test_assemble_round_trip_of_encoded_ground_truth():
    cfg = tiny_config()
    rng = np.random.default_rng(11)
    templates = SizeTemplateTable(cfg.size_templates)
    for i in range(50):
        patch = synthetic_patch(rng, car=True, frame_id=i)
        gt = patch.gt_box_local
        centroid = patch.points[patch.point_labels == CAR, :2].mean(axis=0)
        enc = encode_box(gt, centroid, templates, cfg.num_heading_bins)
        raw = _raw_from_encoding(enc, cfg.num_heading_bins, cfg.num_sizes)
        assert np.max(np.abs(box_corners(decode_raw_box(raw, centroid, cfg)) - box_corners(gt))) <= 1e-6
        det = assemble_detection(patch, np.array([0.0, 1.0]), np.zeros((len(patch.points), 2)),
                                 patch.point_labels == CAR, raw, centroid, cfg)
        truth = gt.transformed(patch.view_angle)
        assert np.max(np.abs(box_corners(det.box) - box_corners(truth))) <= 1e-6


def test_assemble_without_box_for_clutter_prediction():
    cfg = tiny_config()
    patch = synthetic_patch(np.random.default_rng(0), car=True)
    det = assemble_detection(patch, np.array([1.0, 0.0]), np.zeros((len(patch.points), 2)),
                             patch.point_labels == CAR, None, None, cfg)
    assert isinstance(det, DetectionOutput)
    assert det.box is None and det.predicted_label == 0


def _rotate_patch_frame(frame, phi):
    from radar_pointnet.core_types import RadarFrame, RadarTarget
    c, s = math.cos(phi), math.sin(phi)
    targets = [RadarTarget(c * t.x - s * t.y, s * t.x + c * t.y, t.v_r, t.rcs) for t in frame.targets]
    box = frame.gt_box.transformed(phi) if frame.gt_box is not None else None
    return RadarFrame(frame.frame_id, frame.maneuver_id, targets, frame.ego, box, frame.point_labels)


def test_detection_rotation_covariance(model):
    from radar_pointnet.patches import frame_patches, sample_points
    from radar_pointnet.sim import ManeuverSpec, generate_maneuver

    model = copy.deepcopy(model)
    # bias both heads towards car so that every patch reaches the box stage
    with torch.no_grad():
        model.cls_out.bias[CAR] += 10.0
        model.seg_out.bias[CAR] += 10.0

    frames = generate_maneuver(ManeuverSpec("figure_eight", duration=3.0, cycle_period=1.0, seed=6))
    checked = 0
    for frame in frames:
        for phi in (0.7, -2.1):
            rotated = _rotate_patch_frame(frame, phi)
            a = [sample_points(p, np.random.default_rng(k), 12, "test") for k, p in enumerate(frame_patches(frame))]
            b = [sample_points(p, np.random.default_rng(k), 12, "test") for k, p in enumerate(frame_patches(rotated))]
            det_a = detect_patches(model, a, np.random.default_rng(0))
            det_b = detect_patches(model, b, np.random.default_rng(0))
            for da, db in zip(det_a, det_b):
                assert (da.box is None) == (db.box is None)
                if da.box is not None:
                    expected = box_corners(da.box.transformed(phi))
                    assert np.max(np.abs(box_corners(db.box) - expected)) <= 1e-4
                    checked += 1
    assert checked > 0


def test_eval_mode_is_deterministic(model):
    patches = random_batch(3, 8, 12)
    a = detect_patches(model, patches, np.random.default_rng(1))
    b = detect_patches(model, patches, np.random.default_rng(1))
    for da, db in zip(a, b):
        np.testing.assert_array_equal(da.point_logits, db.point_logits)
        assert da.box == db.box


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        m = RadarPointNet(tiny_config(), FeatureStats(0.5, 2.0, -3.0, 4.0))
        m.train()
        with torch.no_grad():
            m.forward_cls_seg(torch.randn(8, 12, 4))
        m.eval()
        path = save_checkpoint(m, tmp_path, {"seg_f1": 0.5})
        loaded = load_checkpoint(path, tiny_config())
        assert loaded.stats == m.stats
        for (ka, va), (kb, vb) in zip(m.state_dict().items(), loaded.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_architecture_mismatch(self, tmp_path):
        path = save_checkpoint(RadarPointNet(tiny_config()), tmp_path)
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path, tiny_config(num_heading_bins=6))

    def test_tensor_shape_mismatch(self, tmp_path):
        import json
        path = save_checkpoint(RadarPointNet(tiny_config()), tmp_path)
        doc = json.loads(path.read_text())
        doc["tensors"][0]["shape"] = [999]
        path.write_text(json.dumps(doc))
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path)
