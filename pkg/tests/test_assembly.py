# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest

from occlupose.bodytools import SKELETON, Camera, Pose2D, encode_depth, project_points
from occlupose.errors import DomainError, ValidationError
from occlupose.operators.assembly import (DETECTED, MISSING, REASONED, AssemblyConfig, JointCandidate,
                                          PersonEstimate, assemble, extract_peaks, infer_root_depth, lift_to_3d,
                                          score_limb, tag_provenance)
from occlupose.operators.capsules import CapsulePose, CapsuleShape, compose_rotvecs, pose_body
from occlupose.operators.pipeline import run_pipeline
from occlupose.operators.scenes import SceneConfig, relaxed_theta, sample_scene
from occlupose.operators.targets import TargetConfig, person_maps, split_by_visibility
from occlupose.preferences import RunConfig

CAMERA = Camera(300.0, 128.0, 128.0, 256, 256)
NECK = SKELETON.index("neck")
L_HIP, R_HIP = SKELETON.index("l_hip"), SKELETON.index("r_hip")
L_SHOULDER, R_SHOULDER = SKELETON.index("l_shoulder"), SKELETON.index("r_shoulder")


def relaxed_person(x, z, person_id=1, yaw=0.0):
    theta = relaxed_theta()
    for e, (parent, _) in enumerate(SKELETON.edges):
        if parent == 0:
            theta[e] = compose_rotvecs(np.array([0.0, yaw, 0.0]), theta[e])
    return pose_body(CapsuleShape.template(), CapsulePose(theta, (x, 0.0, z)), person_id)


def perfect(bodies, camera=CAMERA):
    people = [person_maps(body.joints, camera, TargetConfig()) for body in bodies]
    labels = np.full((len(bodies), 15), 2)
    return split_by_visibility(people, labels, (camera.height // 4, camera.width // 4)).all


def gaussian_channel(h, w, row, col, sigma=2.0):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((xs - col) ** 2 + (ys - row) ** 2) / (2 * sigma ** 2))


# peaks

def test_single_peak():
    keypoints = np.zeros((32, 32, 15))
    keypoints[..., 4] = gaussian_channel(32, 32, 10.3, 20.0)
    found = extract_peaks(keypoints, 0.3)
    assert len(found) == 1
    assert found[0].type == 4
    assert found[0].position == pytest.approx((20.0, 10.3))
    assert found[0].cell == (10, 20)


def test_empty_map_has_no_peaks():
    assert extract_peaks(np.zeros((16, 16, 15)), 0.3) == []


def test_adjacent_peaks_suppressed():
    keypoints = np.zeros((16, 16, 15))
    keypoints[10, 12, 0] = 1.0
    keypoints[10, 13, 0] = 1.0
    found = extract_peaks(keypoints, 0.3)
    assert len(found) == 1
    assert found[0].cell == (10, 12)


def test_peaks_sorted_and_thresholded():
    keypoints = np.zeros((16, 16, 15))
    keypoints[2, 2, 1] = 0.6
    keypoints[8, 8, 3] = 0.9
    keypoints[12, 12, 5] = 0.2
    found = extract_peaks(keypoints, 0.3)
    assert [k.type for k in found] == [3, 1]
    assert [k.id for k in found] == [0, 1]


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1])
def test_peak_threshold_bounds(tau):
    with pytest.raises(ValidationError):
        extract_peaks(np.zeros((4, 4, 15)), tau)


# limb scoring

def _edge_paf(direction, dz=0.0, shape=(16, 16)):
    paf = np.zeros(shape + (3,))
    paf[..., 0], paf[..., 1], paf[..., 2] = direction[0], direction[1], dz
    return paf


def test_aligned_limb_scores_one():
    a, b = JointCandidate(0, (2.0, 5.0), 1.0, 0), JointCandidate(1, (10.0, 5.0), 1.0, 1)
    assert score_limb(_edge_paf((1.0, 0.0)), a, b) == pytest.approx(1.0)
    assert score_limb(_edge_paf((0.0, 1.0)), a, b) == pytest.approx(0.0)
    assert score_limb(_edge_paf((-1.0, 0.0)), a, b) == pytest.approx(-1.0)


def test_coincident_candidates_score_zero():
    a = JointCandidate(0, (4.0, 4.0), 1.0, 0)
    assert score_limb(_edge_paf((1.0, 0.0)), a, JointCandidate(1, (4.0, 4.0), 1.0, 1)) == 0.0


def test_depth_inconsistency_is_penalised():
    a, b = JointCandidate(0, (2.0, 5.0), 1.0, 0), JointCandidate(1, (10.0, 5.0), 1.0, 1)
    # 8 cells at 4 px per cell, focal 300, depth 3000 -> 320 mm lateral; bone 400 -> implied |dz| 240
    consistent = score_limb(_edge_paf((1.0, 0.0), 240.0), a, b, 3000.0, 300.0, 400.0)
    wrong = score_limb(_edge_paf((1.0, 0.0), 900.0), a, b, 3000.0, 300.0, 400.0)
    assert consistent == pytest.approx(1.0)
    assert wrong < consistent


# assembly

def _estimates(bodies, config=None):
    maps = perfect(bodies)
    config = config or AssemblyConfig()
    diagnostics = {}
    people = assemble(extract_peaks(maps, config.tau), maps.pafs, config, maps.root_depth, CAMERA, diagnostics)
    return maps, people, diagnostics


def test_single_person_is_complete():
    _, people, diagnostics = _estimates([relaxed_person(0.0, 4000.0)])
    assert len(people) == 1
    assert people[0].present.all()
    assert people[0].provenance == [DETECTED] * 15
    assert diagnostics["unassigned"] == 0


def _swap_free(bodies, people):
    truths = [project_points(CAMERA, body.joints.joints) for body in bodies]
    for person in people:
        best = min(truths, key=lambda t: np.linalg.norm(t[0] - person.joints2d[0]))
        assert np.abs(person.joints2d - best).max() < 0.6 * 4


def test_three_people_group_exactly():
    bodies = [relaxed_person(-1500.0, 5000.0), relaxed_person(0.0, 5500.0, 2, yaw=0.4),
              relaxed_person(1500.0, 6000.0, 3, yaw=-0.3)]
    _, people, _ = _estimates(bodies)
    assert len(people) == 3
    assert all(person.present.all() for person in people)
    _swap_free(bodies, people)


def test_empty_candidates():
    assert assemble([], np.zeros((16, 16, 42)), AssemblyConfig()) == []


def test_max_people_cap():
    bodies = [relaxed_person(-1500.0, 5000.0), relaxed_person(0.0, 5500.0, 2), relaxed_person(1500.0, 6000.0, 3)]
    _, people, diagnostics = _estimates(bodies, AssemblyConfig(max_people=2))
    assert len(people) == 2
    assert diagnostics["droppedPairs"] > 0


def test_assembly_is_idempotent():
    bodies = [relaxed_person(-800.0, 4500.0), relaxed_person(900.0, 5200.0, 2, yaw=0.5)]
    maps = perfect(bodies)
    candidates = extract_peaks(maps, 0.3)
    first = assemble(candidates, maps.pafs, AssemblyConfig(), maps.root_depth, CAMERA)
    second = assemble(candidates, maps.pafs, AssemblyConfig(), maps.root_depth, CAMERA)
    assert [p.to_dict() for p in first] == [p.to_dict() for p in second]


def test_provenance_marks_reasoned_joints():
    maps, people, _ = _estimates([relaxed_person(0.0, 4000.0)])
    detected = maps.keypoints.copy()
    detected[..., NECK] = 0.0
    tag_provenance(people, detected, 0.3)
    assert people[0].provenance[NECK] == REASONED
    assert people[0].provenance[0] == DETECTED


# root depth

def _torso_person(depths, confidences):
    person = PersonEstimate()
    root_maps = np.zeros((64, 64, 7))
    for k, joint in enumerate(SKELETON.torso_set):
        row, col = 10 + 5 * k, 20
        person.joints2d[joint] = (col * 4.0, row * 4.0)
        person.confidences[joint] = confidences.get(joint, 0.0)
        if joint in depths:
            root_maps[row, col, k] = encode_depth(CAMERA, depths[joint])
    return person, root_maps


def test_root_from_pelvis():
    person, maps = _torso_person({0: 3456.0}, {0: 0.9})
    depth, source = infer_root_depth(person, maps, CAMERA)
    assert depth == pytest.approx(3456.0)
    assert source == "pelvis"


def test_root_from_hips():
    person, maps = _torso_person({L_HIP: 2900.0, R_HIP: 3100.0}, {0: 0.2, L_HIP: 0.9, R_HIP: 0.8})
    assert infer_root_depth(person, maps, CAMERA) == (pytest.approx(3000.0), "hips")


def test_root_from_shoulders():
    person, maps = _torso_person({L_SHOULDER: 2950.0, R_SHOULDER: 3050.0}, {L_SHOULDER: 0.9, R_SHOULDER: 0.9})
    person.rel_depths[SKELETON.parent_edge[NECK]] = -40.0
    assert infer_root_depth(person, maps, CAMERA) == (pytest.approx(3040.0), "shoulders")
    person.rel_depths[:] = np.nan
    depth, _ = infer_root_depth(person, maps, CAMERA, shoulder_depth_prior=25.0)
    assert depth == pytest.approx(2975.0)


def test_root_from_single_joint():
    person, maps = _torso_person({NECK: 3100.0}, {NECK: 0.7})
    person.rel_depths[SKELETON.parent_edge[NECK]] = 60.0
    assert infer_root_depth(person, maps, CAMERA) == (pytest.approx(3040.0), "single:neck")


def test_root_unresolved():
    person, maps = _torso_person({0: 3000.0}, {0: 0.3})
    assert infer_root_depth(person, maps, CAMERA) == (None, "unresolved")


# lifting

def test_lift_zero_depths_share_plane():
    person = PersonEstimate()
    person.joints2d[:] = np.column_stack([np.linspace(40, 200, 15), np.linspace(60, 180, 15)])
    person.rel_depths[:] = 0.0
    person.root_depth = 4200.0
    pose = lift_to_3d(person, CAMERA)
    assert pose.joints[:, 2] == pytest.approx(np.full(15, 4200.0))
    assert project_points(CAMERA, pose.joints) == pytest.approx(person.joints2d)


def test_lift_missing_child_stays_missing():
    person = PersonEstimate()
    person.joints2d[:] = 128.0
    person.joints2d[SKELETON.index("l_elbow")] = np.nan
    person.rel_depths[:] = 10.0
    person.root_depth = 4000.0
    pose = lift_to_3d(person, CAMERA)
    assert not pose.present[SKELETON.index("l_elbow")]
    assert pose.joints[SKELETON.index("l_wrist"), 2] == pytest.approx(4040.0)


def test_lift_without_root_raises():
    with pytest.raises(DomainError):
        lift_to_3d(PersonEstimate(), CAMERA)


def test_person_estimate_dict_round_trip():
    _, people, _ = _estimates([relaxed_person(0.0, 4000.0)])
    person = people[0]
    person.root_depth, person.root_source = 4000.0, "pelvis"
    person.pose3d = lift_to_3d(person, CAMERA)
    back = PersonEstimate.from_dict(person.to_dict())
    assert back.to_dict() == person.to_dict()
    assert PersonEstimate().to_dict()["joints"][0]["provenance"] == MISSING


def test_pose2d_view_of_an_estimate():
    _, people, _ = _estimates([relaxed_person(0.0, 4000.0)])
    person = people[0]
    assert person.pose2d.depths is None
    person.confidences[NECK] = 1.3
    person.root_depth, person.root_source = 4000.0, "pelvis"
    person.pose3d = lift_to_3d(person, CAMERA)
    pose = person.pose2d
    assert pose.confidences[NECK] == 1.0
    assert np.array_equal(pose.joints, person.joints2d, equal_nan=True)
    assert np.array_equal(pose.depths, person.pose3d.joints[:, 2], equal_nan=True)
    assert person.to_dict()["joints"][NECK]["confidence"] == 1.0
    with pytest.raises(ValidationError):
        Pose2D(person.joints2d, person.confidences)


# perfect-input pipeline

def check_perfect_frame(bodies, camera=CAMERA):
    result = run_pipeline(camera, RunConfig(), maps=perfect(bodies, camera))
    assert len(result.people) == len(bodies)
    for person in result.people:
        truth = min(bodies, key=lambda b: np.nanmean(np.linalg.norm(project_points(camera, b.joints.joints)
                                                                   - person.joints2d, axis=1)))
        found = person.pose3d.present
        assert found.sum() >= 2
        reprojected = project_points(camera, person.pose3d.joints[found])
        assert np.abs(reprojected - project_points(camera, truth.joints.joints[found])).max() < 0.6 * 4
        assert np.linalg.norm(person.pose3d.joints[found] - truth.joints.joints[found], axis=1).mean() < 20.0
    return result


def test_perfect_maps_single_person():
    result = check_perfect_frame([relaxed_person(100.0, 4500.0, yaw=0.3)])
    assert result.diagnostics["rootDepthSources"] == ["pelvis"]


def test_perfect_maps_three_people():
    check_perfect_frame([relaxed_person(-1500.0, 5000.0), relaxed_person(0.0, 5500.0, 2, yaw=0.4),
                         relaxed_person(1500.0, 6000.0, 3, yaw=-0.3)])


def test_root_search_without_pelvis():
    body = relaxed_person(200.0, 5000.0, yaw=0.6)
    maps, people, _ = _estimates([body])
    person = people[0]
    person.confidences[0] = 0.0
    depth, source = infer_root_depth(person, maps.root_depth, CAMERA)
    assert source == "hips"
    assert depth == pytest.approx(body.joints.joints[0, 2], rel=0.03)
    person.confidences[[L_HIP, R_HIP]] = 0.0
    depth, source = infer_root_depth(person, maps.root_depth, CAMERA)
    assert source == "shoulders"
    assert depth == pytest.approx(body.joints.joints[0, 2], rel=0.03)


@pytest.mark.slow
def test_perfect_input_suite():
    config = SceneConfig(image_width=384, image_height=384, focal=300.0, min_people=3, max_people=3,
                         separation_px=70.0, occluder_density=0.0, pose_perturbation=0.2,
                         depth_min=5000.0, depth_max=6000.0)
    for seed in range(100):
        scene = sample_scene(seed, config)
        check_perfect_frame(scene.people, scene.camera)


@pytest.mark.slow
def test_root_search_suite():
    config = SceneConfig(min_people=1, max_people=1, occluder_density=0.0)
    hits = 0
    for seed in range(200):
        scene = sample_scene(seed, config)
        maps = perfect(scene.people, scene.camera)
        cfg = AssemblyConfig()
        people = assemble(extract_peaks(maps, cfg.tau), maps.pafs, cfg, maps.root_depth, scene.camera)
        if not people:
            continue
        person = max(people, key=lambda p: p.present.sum())
        person.confidences[0] = 0.0
        depth, source = infer_root_depth(person, maps.root_depth, scene.camera)
        truth = scene.people[0].joints.joints[0, 2]
        hits += depth is not None and abs(depth - truth) <= 0.03 * truth
    assert hits >= 180
