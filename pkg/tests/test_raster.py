# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest

from occlupose.operators.raster import (cast_ray, intersect_box, intersect_capsule, intersect_sphere, ray_directions,
                                        rasterize, render_features, scene_primitives)
from occlupose.operators.scenes import Occluder

from .conftest import person_at, scene_of

FORWARD = np.array([[0.0, 0.0, 1.0]])


def test_primitive_entry_depths():
    assert intersect_sphere(FORWARD, (0.0, 0.0, 1000.0), 100.0)[0] == pytest.approx(900.0)
    assert intersect_box(FORWARD, (0.0, 0.0, 1000.0), (50.0, 50.0, 50.0))[0] == pytest.approx(950.0)
    assert intersect_capsule(FORWARD, (-100.0, 0.0, 1000.0), (100.0, 0.0, 1000.0), 50.0)[0] == pytest.approx(950.0)


def test_primitive_misses_are_inf():
    assert np.isinf(intersect_sphere(FORWARD, (500.0, 0.0, 1000.0), 100.0)[0])
    assert np.isinf(intersect_box(FORWARD, (0.0, 500.0, 1000.0), (50.0, 50.0, 50.0))[0])
    # behind the camera
    assert np.isinf(intersect_sphere(FORWARD, (0.0, 0.0, -1000.0), 100.0)[0])


def test_single_person_masks(camera):
    scene = scene_of(camera, [person_at(0.0, 4000.0)])
    masks = rasterize(scene)
    assert masks.shape == (64, 64)
    assert masks.instance_map[32, 32] == 1
    assert 3850.0 < masks.depth_buffer[32, 32] < 3950.0
    assert masks.instance_map[0, 0] == 0
    assert np.isinf(masks.depth_buffer[0, 0])
    assert masks.part_map[0, 0] == 0
    assert np.all(masks.part_map[masks.instance_map == 1] > 0)


def test_cast_ray_matches_depth_buffer(camera):
    scene = scene_of(camera, [person_at(-300.0, 3500.0), person_at(400.0, 5000.0, person_id=2)],
                     [Occluder("sphere", np.array([0.0, 300.0, 2500.0]), np.array([150.0]))])
    masks = rasterize(scene)
    prims = scene_primitives(scene)
    for row, col in [(32, 32), (30, 20), (40, 45), (50, 32), (5, 5)]:
        t, owner, part = cast_ray(prims, camera, (col + 0.5, row + 0.5))
        assert t == masks.depth_buffer[row, col]
        assert owner == masks.instance_map[row, col]
        assert part == masks.part_map[row, col]


def test_nearer_surface_wins(camera):
    scene = scene_of(camera, [person_at(0.0, 3000.0), person_at(0.0, 5000.0, person_id=2)])
    masks = rasterize(scene)
    assert masks.instance_map[32, 32] == 1
    assert masks.depth_buffer[32, 32] < 3000.0


def test_occluder_owner_is_negative(camera):
    box = Occluder("box", np.array([0.0, 0.0, 2000.0]), np.array([300.0, 300.0, 50.0]))
    masks = rasterize(scene_of(camera, [person_at(0.0, 4000.0)], [box]))
    assert masks.instance_map[32, 32] == -1
    assert masks.part_map[32, 32] == 0
    assert masks.depth_buffer[32, 32] == pytest.approx(1950.0)


def test_features_are_normalised(camera):
    scene = scene_of(camera, [person_at(0.0, 4000.0), person_at(500.0, 5000.0, person_id=2)])
    masks = rasterize(scene)
    features = render_features(scene, masks)
    assert features.shape == (64, 64, 4)
    assert features.dtype == np.float32
    assert features.min() >= 0.0 and features.max() <= 1.0
    assert np.array_equal(features[..., 1] > 0, masks.instance_map > 0)
    assert features[..., 3].sum() > 0


def test_empty_scene_is_background(camera):
    scene = scene_of(camera, [])
    masks = rasterize(scene)
    assert not masks.instance_map.any()
    assert np.isinf(masks.depth_buffer).all()
    assert not render_features(scene, masks).any()


def test_supersampled_majority_matches(camera):
    scene = scene_of(camera, [person_at(-200.0, 4000.0), person_at(300.0, 5000.0, person_id=2)],
                     [Occluder("box", np.array([100.0, 200.0, 3000.0]), np.array([150.0, 100.0, 100.0]))])
    direct = rasterize(scene).instance_map
    fine = rasterize(scene_of(camera.scaled(2), scene.people, scene.occluders)).instance_map
    blocks = fine.reshape(64, 2, 64, 2).transpose(0, 2, 1, 3).reshape(64, 64, 4)
    agree = 0
    for row in range(64):
        for col in range(64):
            values, counts = np.unique(blocks[row, col], return_counts=True)
            agree += direct[row, col] in values[counts == counts.max()]
    assert agree / direct.size >= 0.99


def test_moving_occluder_changes_only_its_pixels(camera):
    people = [person_at(0.0, 4000.0)]
    before = Occluder("sphere", np.array([-150.0, 0.0, 2500.0]), np.array([120.0]))
    after = Occluder("sphere", np.array([150.0, 0.0, 2500.0]), np.array([120.0]))
    a = rasterize(scene_of(camera, people, [before]))
    b = rasterize(scene_of(camera, people, [after]))
    changed = (a.instance_map != b.instance_map) | (a.depth_buffer != b.depth_buffer)
    vs, us = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5, indexing="ij")
    dirs = ray_directions(camera, us, vs)
    hit = np.isfinite(intersect_sphere(dirs, before.center, 120.0)) | np.isfinite(
        intersect_sphere(dirs, after.center, 120.0))
    assert changed.any()
    assert not (changed & ~hit).any()
