# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest
import torch

from occlupose.errors import ValidationError
from occlupose.operators.detector import DetectorConfig, LossWeights, build_detector
from occlupose.operators.dsed import (DSED, DsedConfig, EncoderTrace, HourglassReasoner, build_reasoner,
                                      load_reasoner, loss_occ, loss_reason, map_terms, match_channels,
                                      matched_hourglass_width, reason_infer, reasoner_input, save_reasoner,
                                      student_forward, teacher_forward, train_dsed, train_reasoner)
from occlupose.operators.targets import HeatmapSet
from occlupose.operators.training import SceneDataset, TrainConfig, collate_records

TOY = dict(levels=2, base_channels=8, max_channels=16)


def toy_reasoner(seed=0, **overrides):
    torch.manual_seed(seed)
    return build_reasoner(DsedConfig(**{**TOY, **overrides})).eval()


def toy_maps(rng, h=8, w=8, n=1, dtype=torch.float64, paf_channels=42):
    def t(*shape):
        return torch.as_tensor(rng.normal(size=shape), dtype=dtype)
    return HeatmapSet(t(n, h, w, 15).abs().clamp(max=1.0), t(n, h, w, paf_channels), torch.zeros(n, h, w, 7, dtype=dtype))


def test_traces_follow_channel_plan():
    model = toy_reasoner()
    maps = toy_maps(np.random.default_rng(0), dtype=torch.float32)
    teacher, t_recon = teacher_forward(model, maps)
    student, s_recon = student_forward(model, maps)
    assert len(teacher) == 2
    assert teacher.shapes == student.shapes == [(1, 8, 8, 8), (1, 16, 4, 4)]
    assert tuple(s_recon.keypoints.shape) == (1, 8, 8, 15)
    assert tuple(t_recon.pafs.shape) == (1, 8, 8, 42)


def test_zero_input_gives_finite_outputs():
    model = toy_reasoner()
    zero = HeatmapSet(torch.zeros(1, 8, 8, 15), torch.zeros(1, 8, 8, 42), torch.zeros(1, 8, 8, 7))
    trace, recon = teacher_forward(model, zero)
    assert all(torch.isfinite(level).all() for level in trace.levels)
    assert torch.isfinite(recon.pafs).all()


def test_student_is_deterministic():
    model = toy_reasoner(2)
    maps = toy_maps(np.random.default_rng(2), dtype=torch.float32)
    with torch.no_grad():
        _, a = student_forward(model, maps)
        _, b = student_forward(model, maps)
    assert torch.equal(a.keypoints, b.keypoints) and torch.equal(a.pafs, b.pafs)


def test_input_layout_checks():
    config = DsedConfig(**TOY)
    rng = np.random.default_rng(3)
    with pytest.raises(ValidationError):
        reasoner_input(toy_maps(rng, paf_channels=28), config)
    assert reasoner_input(toy_maps(rng, h=7), config).shape == (1, 15 + 42, 8, 8)
    flat = DsedConfig(**TOY, channel_mode='2d')
    assert reasoner_input(toy_maps(rng), flat).shape == (1, 15 + 28, 8, 8)
    maps = toy_maps(rng)
    x = reasoner_input(maps, config, torch.float64)
    assert x[0, 15 + 2, 0, 0] == pytest.approx(float(maps.pafs[0, 0, 0, 2]) / 1000.0)


def test_odd_grids_are_padded_and_cropped():
    model = toy_reasoner(4, levels=3)
    maps = toy_maps(np.random.default_rng(4), h=9, w=9, dtype=torch.float32)
    assert reasoner_input(maps, model.config).shape == (1, 15 + 42, 12, 12)
    _, teacher = teacher_forward(model, maps)
    _, student = student_forward(model, maps)
    assert tuple(teacher.keypoints.shape) == tuple(student.keypoints.shape) == (1, 9, 9, 15)
    assert tuple(student.pafs.shape) == (1, 9, 9, 42)
    fused = reason_infer(model, HeatmapSet(maps.keypoints[0].numpy(), maps.pafs[0].numpy(),
                                           maps.root_depth[0].numpy()))
    assert fused.keypoints.shape == (9, 9, 15)


def _trace(rng, dtype=torch.float64):
    return EncoderTrace([torch.as_tensor(rng.normal(size=(1, 8, 8, 8)), dtype=dtype),
                         torch.as_tensor(rng.normal(size=(1, 16, 4, 4)), dtype=dtype)])


def test_loss_reason_zero_at_match():
    rng = np.random.default_rng(4)
    trace, targets = _trace(rng), toy_maps(rng)
    total, terms = loss_reason(trace, trace, targets, targets, LossWeights())
    assert float(total) == 0.0
    assert float(terms["extract"]) == 0.0


def test_extract_closed_form():
    rng = np.random.default_rng(5)
    teacher, targets = _trace(rng), toy_maps(rng)
    eps = 0.3
    student = EncoderTrace([teacher.levels[0] + eps, teacher.levels[1]])
    _, terms = loss_reason(student, teacher, targets, targets, LossWeights())
    assert float(terms["extract"]) == pytest.approx(eps ** 2 / 2)


def test_teacher_gets_no_extract_gradient():
    rng = np.random.default_rng(6)
    teacher = EncoderTrace([level.requires_grad_(True) for level in _trace(rng).levels])
    student = EncoderTrace([level.requires_grad_(True) for level in _trace(rng).levels])
    targets = toy_maps(rng)
    total, _ = loss_reason(student, teacher, targets, targets, LossWeights())
    total.backward()
    assert all(level.grad is None for level in teacher.levels)
    assert all(level.grad is not None for level in student.levels)


def test_loss_reason_level_mismatch():
    rng = np.random.default_rng(7)
    short = EncoderTrace(_trace(rng).levels[:1])
    targets = toy_maps(rng)
    with pytest.raises(ValidationError):
        loss_reason(short, _trace(rng), targets, targets, LossWeights())


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    teacher, targets, occluded = _trace(rng), toy_maps(rng), toy_maps(rng)
    start_trace, start_recon = _trace(rng), toy_maps(rng)
    inputs = tuple(x.clone().requires_grad_(True) for x in
                   (*start_trace.levels, start_recon.keypoints, start_recon.pafs))
    weights = LossWeights()

    def objective(l0, l1, kp, paf):
        recon = HeatmapSet(kp, paf, start_recon.root_depth)
        total, _ = loss_reason(EncoderTrace([l0, l1]), teacher, recon, targets, weights)
        return total + loss_occ(recon, occluded, weights)

    assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_loss_occ_masks_to_support():
    rng = np.random.default_rng(9)
    recon = toy_maps(rng)
    empty = HeatmapSet(torch.zeros(1, 8, 8, 15, dtype=torch.float64), torch.zeros(1, 8, 8, 42, dtype=torch.float64),
                       torch.zeros(1, 8, 8, 7, dtype=torch.float64), paf_support=torch.zeros(1, 8, 8, 14, dtype=torch.bool))
    assert float(loss_occ(recon, empty, LossWeights())) == 0.0
    assert float(loss_occ(recon, recon, LossWeights())) == 0.0


def _silent(model):
    head = model.decoder.head if isinstance(model, DSED) else model.head[-1]
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    return model


def _detected(rng):
    kp = rng.uniform(size=(8, 8, 15))
    pafs = np.zeros((8, 8, 42))
    pafs[2:4, 1:6, 0] = 1.0
    pafs[2:4, 1:6, 2] = 150.0
    return HeatmapSet(kp, pafs, rng.uniform(size=(8, 8, 7)))


def test_zero_reconstruction_leaves_detection():
    detected = _detected(np.random.default_rng(10))
    fused = reason_infer(_silent(toy_reasoner()), detected)
    assert np.array_equal(fused.keypoints, detected.keypoints)
    assert np.array_equal(fused.pafs, detected.pafs)
    assert np.array_equal(fused.root_depth, detected.root_depth)


def test_fusion_clamps_and_keeps_peaks():
    detected = _detected(np.random.default_rng(11))
    model = toy_reasoner(4)
    with torch.no_grad():
        model.decoder.head.bias.fill_(3.0)
    fused = reason_infer(model, detected)
    assert fused.keypoints.min() >= 0.0 and fused.keypoints.max() <= 1.0
    assert np.all(fused.keypoints >= detected.keypoints)
    assert np.array_equal(fused.pafs[2:4, 1:6, :3], detected.pafs[2:4, 1:6, :3])


def test_matched_hourglass_width_is_closest():
    config = DsedConfig(**TOY)
    target = DSED(config).inference_parameters()
    width = matched_hourglass_width(config)

    def gap(w):
        return abs(HourglassReasoner(config, w).inference_parameters() - target)

    assert gap(width) <= gap(width + 4)
    if width > 4:
        assert gap(width) <= gap(width - 4)
    model = build_reasoner(DsedConfig(**TOY, reasoner='hourglass'))
    assert model.width == width


def test_reasoner_checkpoint_round_trip(tmp_path):
    for kind in ("dsed", "hourglass"):
        model = toy_reasoner(5, reasoner=kind, hourglass_width=12)
        save_reasoner(tmp_path / f"{kind}.ckpt", model)
        again = load_reasoner(tmp_path / f"{kind}.ckpt")
        assert again.kind == kind
        maps = toy_maps(np.random.default_rng(5), dtype=torch.float32)
        x = reasoner_input(maps, model.config)
        with torch.no_grad():
            assert torch.equal(model.reconstruct(x), again.reconstruct(x))


def _tiny_detector():
    torch.manual_seed(0)
    return build_detector(DetectorConfig(stacks=2, base_channels=8, hourglass_depth=2)).eval()


def test_training_alternates_modes(labelled_dataset):
    dataset = SceneDataset(labelled_dataset)
    train = TrainConfig(epochs=2, batch_size=1)
    _, curve, schedule = train_reasoner(dataset, DsedConfig(**TOY), LossWeights(), train, 0, _tiny_detector())
    modes = [mode for _, _, mode in schedule]
    assert modes == [1, 2] * 3
    assert "occ" in {name for _, name, _ in curve.rows}


def test_mode2_only_never_calls_detector(labelled_dataset):
    dataset = SceneDataset(labelled_dataset)
    train = TrainConfig(epochs=1, batch_size=2)
    config = DsedConfig(**TOY, mode2_only=True)
    _, curve, schedule = train_reasoner(dataset, config, LossWeights(), train, 0, detector=object())
    assert {mode for _, _, mode in schedule} == {2}
    assert "occ" not in {name for _, name, _ in curve.rows}


def test_detector_required_for_mode1(labelled_dataset):
    with pytest.raises(ValidationError):
        train_reasoner(SceneDataset(labelled_dataset), DsedConfig(**TOY), LossWeights(), TrainConfig(), 0)


def test_reasoner_training_is_deterministic(labelled_dataset):
    dataset = SceneDataset(labelled_dataset)
    train = TrainConfig(epochs=1, batch_size=2)
    detector = _tiny_detector()
    for kind in ("dsed", "hourglass"):
        config = DsedConfig(**TOY, reasoner=kind)
        a, curve_a, _ = train_reasoner(dataset, config, LossWeights(), train, 3, detector)
        b, curve_b, _ = train_reasoner(dataset, config, LossWeights(), train, 3, detector)
        assert curve_a.rows == curve_b.rows
        for key, value in a.state_dict().items():
            assert torch.equal(value, b.state_dict()[key])


def test_train_dsed_is_deterministic_and_learns(labelled_dataset):
    dataset = SceneDataset(labelled_dataset)
    config = DsedConfig(**TOY, reasoner='hourglass', mode2_only=True)
    train = TrainConfig(epochs=12, batch_size=3)
    a, curve_a, schedule = train_dsed(dataset, config, LossWeights(), train, 5)
    b, curve_b, _ = train_dsed(dataset, config, LossWeights(), train, 5)
    assert a.kind == "dsed"
    assert len(schedule) == 12
    assert curve_a.rows == curve_b.rows
    for key, value in a.state_dict().items():
        assert torch.equal(value, b.state_dict()[key])
    totals = curve_a.values("total")
    assert totals[-1] < totals[0]


@pytest.mark.slow
def test_teacher_learns_to_autoencode(labelled_dataset):
    dataset = SceneDataset(labelled_dataset)
    config = DsedConfig(**TOY, mode2_only=True)
    batch = collate_records([dataset[i] for i in range(len(dataset))])
    untrained = toy_reasoner(0, mode2_only=True)

    def teacher_loss(model):
        with torch.no_grad():
            _, recon = teacher_forward(model, batch["all"])
            lk, lp = map_terms(recon, match_channels(batch["all"], config), 1e-3)
        return float(lk + lp)

    model, _, _ = train_reasoner(dataset, config, LossWeights(), TrainConfig(epochs=300, batch_size=3), 0)
    assert teacher_loss(model) < 0.05 * teacher_loss(untrained)
