# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import numpy as np
import pytest
import torch

from occlupose.bodytools import Camera
from occlupose.operators.capsules import CapsulePose, CapsuleShape, pose_body
from occlupose.operators.occlusion import label_record
from occlupose.operators.scenes import Scene, SceneConfig, generate_dataset
from occlupose.preferences import RunConfig


@pytest.fixture(autouse=True)
def float32_default():
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture
def camera():
    return Camera(focal=100.0, cx=32.0, cy=32.0, width=64, height=64)


def person_at(x, z, person_id=1, y=0.0, theta=None, scale=1.0):
    pose = CapsulePose.rest((x, y, z)) if theta is None else CapsulePose(theta, (x, y, z))
    return pose_body(CapsuleShape.template(scale), pose, person_id=person_id)


def scene_of(camera, people, occluders=()):
    return Scene(list(people), list(occluders), camera, seed=0)


@pytest.fixture
def small_scene_config():
    return SceneConfig(image_width=64, image_height=64, focal=80.0, min_people=1, max_people=2,
                       occluder_density=0.4)


@pytest.fixture
def small_run_config(small_scene_config):
    config = RunConfig()
    config.scene = small_scene_config
    config.detector.base_channels = 8
    config.detector.hourglass_depth = 2
    config.detector.stacks = 2
    config.dsed.levels = 2
    config.dsed.base_channels = 8
    config.dsed.max_channels = 16
    config.refine.hidden = 32
    config.refine.poses = 16
    config.train.epochs = 1
    config.train.batch_size = 2
    return config


@pytest.fixture
def labelled_dataset(tmp_path, small_run_config):
    dataset = generate_dataset(tmp_path / "dataset", 3, 3, small_run_config.scene)
    for index in range(3):
        label_record(dataset, index, small_run_config, "exact")
    return dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
