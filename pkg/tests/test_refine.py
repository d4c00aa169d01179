# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest
import torch

from occlupose.bodytools import SKELETON, Pose3D
from occlupose.operators.assembly import DETECTED, REFINED, TEMPLATE_BONES, PersonEstimate
from occlupose.operators.capsules import CapsulePose, CapsuleShape, pose_body
from occlupose.operators.refine import (RefineConfig, RefineNet, load_refiner, refine_person, refine_pose,
                                        save_refiner, synthetic_poses, train_refine)
from occlupose.operators.scenes import SceneConfig
from occlupose.operators.training import TrainConfig

SMALL = RefineConfig(hidden=16, layers=1, poses=16)
L_WRIST = SKELETON.index("l_wrist")


def rest_pose():
    return pose_body(CapsuleShape.template(), CapsulePose.rest((0.0, 0.0, 4000.0))).joints


def pushing_model(config=SMALL, push=10.0):
    model = RefineNet(config)
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.zero_()
        model.mlp[-1].bias.fill_(push)
    return model.eval()


def test_zero_residual_keeps_complete_pose():
    pose = rest_pose()
    refined, imputed = refine_pose(pushing_model(push=0.0), pose, SMALL)
    assert not imputed.any()
    assert np.allclose(refined.joints, pose.joints)


def test_trust_radius_bounds_present_joints():
    pose = rest_pose()
    refined, _ = refine_pose(pushing_model(), pose, SMALL)
    moves = np.linalg.norm(refined.joints - pose.joints, axis=1)
    assert moves[0] == 0.0
    assert moves[1:] == pytest.approx(np.full(14, SMALL.trust_radius))


def test_sparse_pose_passes_through():
    joints = np.array(rest_pose().joints)
    joints[7:] = np.nan
    pose = Pose3D(joints)
    refined, imputed = refine_pose(pushing_model(), pose, SMALL)
    assert refined is pose
    assert not imputed.any()


def test_missing_pelvis_passes_through():
    joints = np.array(rest_pose().joints)
    joints[0] = np.nan
    pose = Pose3D(joints)
    assert refine_pose(pushing_model(), pose, SMALL)[0] is pose


def test_imputed_bones_are_clamped():
    joints = np.array(rest_pose().joints)
    joints[L_WRIST] = np.nan
    refined, imputed = refine_pose(pushing_model(push=100.0), Pose3D(joints), SMALL)
    assert imputed.tolist() == [j == L_WRIST for j in range(15)]
    assert refined.present.all()
    edge = SKELETON.parent_edge[L_WRIST]
    length = refined.bone_lengths()[edge]
    assert SMALL.bone_min * TEMPLATE_BONES[edge] - 1e-6 <= length <= SMALL.bone_max * TEMPLATE_BONES[edge] + 1e-6


def test_refine_person_marks_imputed():
    joints = np.array(rest_pose().joints)
    joints[L_WRIST] = np.nan
    person = PersonEstimate()
    person.provenance = [DETECTED] * 15
    person.pose3d = Pose3D(joints)
    refine_person(pushing_model(push=0.0), person, SMALL)
    assert person.provenance[L_WRIST] == REFINED
    assert person.provenance.count(REFINED) == 1
    assert refine_person(pushing_model(), PersonEstimate(), SMALL).pose3d is None


def test_synthetic_poses():
    poses = synthetic_poses(5, 3, SceneConfig())
    assert poses.shape == (5, 15, 3)
    assert np.allclose(poses[:, 0], 0.0)
    assert np.array_equal(poses, synthetic_poses(5, 3, SceneConfig()))


def test_training_is_deterministic():
    poses = synthetic_poses(SMALL.poses, 0, SceneConfig())
    train = TrainConfig(epochs=2, batch_size=4)
    first, curve = train_refine(poses, SMALL, train, seed=5)
    second, _ = train_refine(poses, SMALL, train, seed=5)
    assert len(curve.values("total")) == 2
    assert np.all(np.isfinite(curve.values("total")))
    for a, b in zip(first.state_dict().values(), second.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    model = RefineNet(SMALL)
    save_refiner(tmp_path / "refiner.ckpt", model)
    loaded = load_refiner(tmp_path / "refiner.ckpt")
    assert loaded.config == SMALL
    pose = rest_pose()
    assert np.array_equal(refine_pose(model.eval(), pose, SMALL)[0].joints, refine_pose(loaded, pose, SMALL)[0].joints)
