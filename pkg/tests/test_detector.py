# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest
import torch

from occlupose.errors import NumericError, ValidationError
from occlupose.operators.detector import (DetectorConfig, LossWeights, build_detector, detector_forward,
                                          load_detector, loss_vis, predict_maps, save_detector, train_detector)
from occlupose.operators.targets import HeatmapSet, TargetBundle
from occlupose.operators.training import RecordList, SceneDataset, TrainConfig

TINY = dict(stacks=2, base_channels=8, hourglass_depth=2)


def tiny_detector(seed=0):
    torch.manual_seed(seed)
    return build_detector(DetectorConfig(**TINY)).eval()


def random_maps(rng, h=8, w=8, n=1, dtype=torch.float64):
    def t(*shape):
        return torch.as_tensor(rng.normal(size=shape), dtype=dtype)
    return HeatmapSet(t(n, h, w, 15).abs().clamp(max=1.0), t(n, h, w, 42), t(n, h, w, 7) * 100.0)


def test_output_shapes():
    model = tiny_detector()
    outputs = detector_forward(model, np.zeros((64, 64, 4), dtype=np.float32))
    assert len(outputs) == 2
    for out in outputs:
        assert tuple(out.keypoints.shape) == (1, 16, 16, 15)
        assert tuple(out.pafs.shape) == (1, 16, 16, 42)
        assert tuple(out.root_depth.shape) == (1, 16, 16, 7)


def test_bad_inputs_raise():
    model = tiny_detector()
    with pytest.raises(ValidationError):
        detector_forward(model, np.zeros((62, 62, 4), dtype=np.float32))
    with pytest.raises(ValidationError):
        detector_forward(model, np.zeros((64, 64, 3), dtype=np.float32))


def test_any_stride_multiple_is_accepted():
    torch.manual_seed(0)
    model = build_detector(DetectorConfig()).eval()
    with torch.no_grad():
        outputs = detector_forward(model, np.zeros((36, 36, 4), dtype=np.float32))
    for out in outputs:
        assert tuple(out.keypoints.shape) == (1, 9, 9, 15)
        assert tuple(out.pafs.shape) == (1, 9, 9, 42)
        assert tuple(out.root_depth.shape) == (1, 9, 9, 7)
    with torch.no_grad():
        wide = detector_forward(tiny_detector(), np.zeros((2, 20, 44, 4), dtype=np.float32))[-1]
    assert tuple(wide.keypoints.shape) == (2, 5, 11, 15)


def test_forward_is_deterministic_and_finite():
    rng = np.random.default_rng(0)
    for seed in range(5):
        model = tiny_detector(seed)
        features = rng.uniform(size=(2, 64, 64, 4)).astype(np.float32)
        with torch.no_grad():
            first = detector_forward(model, features)[-1]
            second = detector_forward(model, features)[-1]
        assert torch.equal(first.keypoints, second.keypoints)
        assert torch.equal(first.pafs, second.pafs)
        for tensor in (first.keypoints, first.pafs, first.root_depth):
            assert torch.isfinite(tensor).all()


def _exact_root(preds, samples):
    rows = []
    for ch, r, c in samples:
        rows.append((ch, r, c, float(preds.root_depth[0, r, c, ch])))
    return [np.array(rows, dtype=np.float64)]


def test_loss_is_zero_at_targets():
    rng = np.random.default_rng(1)
    target = random_maps(rng)
    root = _exact_root(target, [(0, 2, 3), (4, 5, 5)])
    total, terms = loss_vis([target, target], target, root, LossWeights())
    assert float(total) == 0.0
    assert float(terms["root"]) == 0.0


def test_keypoint_offset_closed_form():
    rng = np.random.default_rng(2)
    target = random_maps(rng)
    eps = 0.01
    pred = HeatmapSet(target.keypoints + eps, target.pafs, target.root_depth)
    total, terms = loss_vis([pred], target, [np.zeros((0, 4))], LossWeights())
    assert float(terms["keypoints"]) == pytest.approx(8 * 8 * 15 * eps ** 2)
    assert float(total) == pytest.approx(8 * 8 * 15 * eps ** 2)


def test_root_term_is_l1_at_samples():
    rng = np.random.default_rng(3)
    target = random_maps(rng)
    root = [np.array([[1.0, 2.0, 2.0, float(target.root_depth[0, 2, 2, 1]) + 3.0]])]
    _, terms = loss_vis([target], target, root, LossWeights())
    assert float(terms["root"]) == pytest.approx(3.0)


def test_loss_ignores_occluded_targets():
    rng = np.random.default_rng(4)
    visible, other = random_maps(rng), random_maps(rng)
    preds = [random_maps(rng)]
    a, _ = loss_vis(preds, TargetBundle(other, visible, other), [np.zeros((0, 4))], LossWeights())
    b, _ = loss_vis(preds, TargetBundle(other, visible, random_maps(rng)), [np.zeros((0, 4))], LossWeights())
    assert float(a) == float(b)


def test_loss_rejects_nan():
    rng = np.random.default_rng(5)
    target = random_maps(rng)
    bad = HeatmapSet(target.keypoints * float("nan"), target.pafs, target.root_depth)
    with pytest.raises(NumericError):
        loss_vis([bad], target, [np.zeros((0, 4))], LossWeights())


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    target = random_maps(rng)
    root = [np.array([[0.0, 1.0, 1.0, 50.0], [3.0, 6.0, 2.0, -20.0]])]
    weights = LossWeights(lam_r_vis=0.1)
    start = random_maps(rng)
    inputs = tuple(x.clone().requires_grad_(True) for x in (start.keypoints, start.pafs, start.root_depth))

    def objective(kp, paf, rd):
        total, _ = loss_vis([HeatmapSet(kp, paf, rd)], target, root, weights)
        return total

    assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_checkpoint_reload_is_exact(tmp_path):
    model = tiny_detector(3)
    save_detector(tmp_path / "detector.ckpt", model)
    again = load_detector(tmp_path / "detector.ckpt")
    features = np.random.default_rng(0).uniform(size=(64, 64, 4)).astype(np.float32)
    a, b = predict_maps(model, features), predict_maps(again, features)
    assert np.array_equal(a.keypoints, b.keypoints)
    assert np.array_equal(a.root_depth, b.root_depth)


def test_training_is_deterministic(labelled_dataset):
    dataset = SceneDataset(labelled_dataset, splits=("visible",))
    train = TrainConfig(epochs=1, batch_size=2)
    first, curve_a = train_detector(dataset, DetectorConfig(**TINY), LossWeights(), train, seed=5)
    second, curve_b = train_detector(dataset, DetectorConfig(**TINY), LossWeights(), train, seed=5)
    assert curve_a.rows == curve_b.rows
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name


def test_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        RecordList([])


@pytest.mark.slow
def test_single_record_memorisation(labelled_dataset):
    dataset = SceneDataset(labelled_dataset, indices=[0], splits=("visible",))
    train = TrainConfig(epochs=300, batch_size=1, learning_rate=2e-3)
    _, curve = train_detector(dataset, DetectorConfig(**TINY), LossWeights(), train, seed=0)
    losses = curve.values("total")
    assert losses[-1] < 0.01 * losses[0]
