# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Synthetic multi-person scenes.

A scene is authored directly in camera frame: people are capsule bodies in a
perturbed relaxed pose, turned about the vertical axis and placed so that the
pelvis lands on the image; occluders are axis-aligned boxes and spheres put
between the camera and a random joint. Everything is drawn from one
``numpy.random.Generator`` seeded by the scene seed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ..bodytools import EDGES, SKELETON, Camera, backproject
from ..errors import ValidationError
from ..props import BoolProperty, FloatProperty, IntProperty
from .base import Operator
from .capsules import (BETA_LOWER, BETA_UPPER, TEMPLATE_BETA, CapsulePose, CapsuleShape, compose_rotvecs,
                       pose_body)
from .files import (get_manifest_path, get_masks_path, get_sidecar_path, read_bridge_file,
                    recursively_create_directories, write_array_container, write_bridge_file)

logger = logging.getLogger(__name__)

MAX_OCCLUDERS = 5
MAX_PEOPLE = 6
_MAX_ATTEMPTS = 30

# Arms hang about 70 degrees below the T-pose.
_ARM_DROP = 1.2
_LIMB_EDGES = (3, 4, 6, 7, 9, 10, 12, 13)
_SPINE_EDGES = (0, 1)
_ROOT_EDGES = tuple(e for e, (p, _) in enumerate(EDGES) if p == 0)


@dataclass
class SceneConfig:
    image_width: int = IntProperty(name="Image Width", description="Rendered image width in pixels (multiple of 4)",
                                   default=256, min=16, max=2048)
    image_height: int = IntProperty(name="Image Height", description="Rendered image height in pixels (multiple of 4)",
                                    default=256, min=16, max=2048)
    focal: float = FloatProperty(name="Focal Length", description="Pinhole focal length in pixels",
                                 default=300.0, min=1.0, max=1e5)
    min_people: int = IntProperty(name="Min People", description="Fewest people per scene",
                                  default=1, min=0, max=MAX_PEOPLE)
    max_people: int = IntProperty(name="Max People", description="Most people per scene",
                                  default=4, min=0, max=MAX_PEOPLE)
    depth_min: float = FloatProperty(name="Nearest Depth", description="Smallest pelvis depth (mm)",
                                     default=3000.0, min=500.0, max=1e5)
    depth_max: float = FloatProperty(name="Farthest Depth", description="Largest pelvis depth (mm)",
                                     default=6000.0, min=500.0, max=1e5)
    pose_perturbation: float = FloatProperty(name="Pose Perturbation",
                                             description="Largest per-axis limb rotation added to the relaxed pose (rad)",
                                             default=0.5, min=0.0, max=1.5)
    yaw_range: float = FloatProperty(name="Yaw Range", description="Largest turn about the vertical axis (rad)",
                                     default=0.8, min=0.0, max=3.14159)
    shape_jitter: float = FloatProperty(name="Shape Jitter", description="Relative spread of sampled radii and scales",
                                        default=0.1, min=0.0, max=0.3)
    occluder_density: float = FloatProperty(name="Occluder Density",
                                            description="0 gives no occluders, 1 allows up to five per scene",
                                            default=0.4, min=0.0, max=1.0)
    separation_px: float = FloatProperty(name="Person Separation",
                                         description="Least horizontal pixel distance between pelvis projections",
                                         default=0.0, min=0.0, max=2048.0)
    guarantee_visible: bool = BoolProperty(name="Guarantee Visible Person",
                                           description="Resample until at least one person has every joint visible",
                                           default=False)

    def camera(self):
        return Camera(self.focal, self.image_width / 2.0, self.image_height / 2.0,
                      self.image_width, self.image_height)

    def check(self):
        if self.max_people < 1:
            raise ValidationError("scene.max_people must allow at least one person", key="scene.max_people")
        if self.min_people > self.max_people:
            raise ValidationError("scene.min_people exceeds scene.max_people", key="scene.min_people")
        if self.depth_min >= self.depth_max:
            raise ValidationError("scene.depth_min must be below scene.depth_max", key="scene.depth_min")
        self.camera()
        return self


@dataclass(frozen=True, eq=False)
class Occluder:
    kind: str
    center: np.ndarray
    size: np.ndarray

    def to_dict(self):
        return {"kind": self.kind, "center": [float(c) for c in self.center], "size": [float(s) for s in self.size]}

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], np.asarray(data["center"], dtype=np.float64), np.asarray(data["size"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Scene:
    people: list
    occluders: list
    camera: Camera
    seed: int = 0

    @property
    def poses(self):
        return [body.joints for body in self.people]

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "camera": self.camera.to_dict(),
            "people": [{
                "personId": body.person_id,
                "beta": [float(b) for b in body.shape.beta],
                "theta": [[float(a) for a in row] for row in body.pose.theta],
                "translation": [float(t) for t in body.pose.translation],
                "joints": body.joints.to_dict()["joints"],
            } for body in self.people],
            "occluders": [o.to_dict() for o in self.occluders],
        }

    @classmethod
    def from_dict(cls, data):
        people = [pose_body(CapsuleShape(p["beta"]), CapsulePose(p["theta"], p["translation"]), p["personId"])
                  for p in data["people"]]
        return cls(people, [Occluder.from_dict(o) for o in data["occluders"]],
                   Camera.from_dict(data["camera"]), int(data["seed"]))

    def with_people(self, people):
        return Scene(list(people), list(self.occluders), self.camera, self.seed)

    def with_occluders(self, occluders):
        return Scene(list(self.people), list(occluders), self.camera, self.seed)


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def sample_shape(rng, config):
    jitter = 1.0 + rng.uniform(-config.shape_jitter, config.shape_jitter, size=10)
    beta = TEMPLATE_BETA * jitter
    scale = beta[7]
    beta[:7] *= scale
    return CapsuleShape(np.clip(beta, BETA_LOWER, BETA_UPPER))


def relaxed_theta():
    theta = np.zeros((len(EDGES), 3))
    theta[SKELETON.parent_edge[SKELETON.index("l_elbow")]] = (0.0, 0.0, _ARM_DROP)
    theta[SKELETON.parent_edge[SKELETON.index("r_elbow")]] = (0.0, 0.0, -_ARM_DROP)
    return theta


def sample_theta(rng, config, yaw=None):
    theta = relaxed_theta()
    amount = config.pose_perturbation
    for e in _LIMB_EDGES:
        theta[e] = compose_rotvecs(theta[e], rng.uniform(-amount, amount, size=3))
    for e in _SPINE_EDGES:
        theta[e] = compose_rotvecs(theta[e], rng.uniform(-0.3 * amount, 0.3 * amount, size=3))
    if yaw is None:
        yaw = rng.uniform(-config.yaw_range, config.yaw_range)
    for e in _ROOT_EDGES:
        theta[e] = compose_rotvecs(np.array([0.0, yaw, 0.0]), theta[e])
    return theta


def _place_pelvis(rng, config, camera, taken):
    for _ in range(_MAX_ATTEMPTS * 2):
        u = rng.uniform(0.15, 0.85) * camera.width
        if all(abs(u - other) >= config.separation_px for other in taken):
            break
    else:
        raise ValidationError("cannot place people with the requested separation", key="scene.separation_px")
    v = rng.uniform(0.45, 0.6) * camera.height
    depth = rng.uniform(config.depth_min, config.depth_max)
    return u, np.array(backproject(camera, (u, v), depth))


def _sample_occluder(rng, people):
    target = people[rng.integers(len(people))]
    joint = target.joints.joints[rng.integers(len(SKELETON.joint_names))]
    center = joint * rng.uniform(0.55, 0.85) + np.append(rng.uniform(-80.0, 80.0, size=2), 0.0)
    if rng.uniform() < 0.5:
        size = rng.uniform(80.0, 300.0, size=3)
        kind = "box"
        reach = size[2]
    else:
        size = np.array([rng.uniform(80.0, 250.0)])
        kind = "sphere"
        reach = size[0]
    if center[2] - reach < 200.0:
        size = size * (center[2] - 200.0) / reach
    return Occluder(kind, center, size)


def _sample_once(rng, seed, config):
    camera = config.camera()
    count = int(rng.integers(config.min_people, config.max_people + 1))
    people, taken = [], []
    for i in range(count):
        shape = sample_shape(rng, config)
        theta = sample_theta(rng, config)
        u, pelvis = _place_pelvis(rng, config, camera, taken)
        taken.append(u)
        people.append(pose_body(shape, CapsulePose(theta, pelvis), person_id=i + 1))
    occluders = []
    max_occluders = int(round(MAX_OCCLUDERS * config.occluder_density))
    if people and max_occluders:
        for _ in range(int(rng.integers(0, max_occluders + 1))):
            occluders.append(_sample_occluder(rng, people))
    return Scene(people, occluders, camera, seed)


def sample_scene(seed, config):
    config.check()
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng(seed if attempt == 0 else [seed, attempt])
        scene = _sample_once(rng, seed, config)
        if not config.guarantee_visible:
            return scene
        from .occlusion import classify_joints
        from .raster import rasterize

        labels = classify_joints(scene, rasterize(scene)).labels
        if np.any(np.all(labels == 2, axis=1)):
            return scene
        logger.debug("scene %d attempt %d has no fully visible person", seed, attempt)
    raise ValidationError(f"no fully visible person after {_MAX_ATTEMPTS} attempts for seed {seed}",
                          key="scene.guarantee_visible")


def scene_seed(base_seed, index):
    """Per-record seed of dataset entry ``index``."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def write_scene_record(dataset_dir, index, scene):
    from .raster import rasterize, render_features

    masks = rasterize(scene)
    features = render_features(scene, masks)
    write_array_container(get_masks_path(dataset_dir, index), {
        "instance_map": masks.instance_map,
        "part_map": masks.part_map,
        "depth_buffer": masks.depth_buffer,
        "features": features,
    })
    sidecar = scene.to_dict()
    sidecar["index"] = index
    write_bridge_file(sidecar, get_sidecar_path(dataset_dir, index))


def read_scene(dataset_dir, index):
    return Scene.from_dict(read_bridge_file(get_sidecar_path(dataset_dir, index)))


def _generate_one(job):
    dataset_dir, index, seed, config = job
    write_scene_record(dataset_dir, index, sample_scene(seed, config))
    return index


def generate_dataset(dataset_dir, base_seed, count, config, workers=1):
    dataset_dir = recursively_create_directories(dataset_dir)
    jobs = [(str(dataset_dir), i, scene_seed(base_seed, i), config) for i in range(count)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for _ in tqdm(pool.map(_generate_one, jobs), total=count, desc="synth-gen", disable=None):
                pass
    else:
        for job in tqdm(jobs, desc="synth-gen", disable=None):
            _generate_one(job)
    write_bridge_file({
        "formatVersion": 1,
        "seed": base_seed,
        "records": list(range(count)),
        "depthNormalization": "Zhat = Z * heatmapWidth / focal",
    }, get_manifest_path(dataset_dir))
    return dataset_dir


# =============================================================================
# OPERATORS
# =============================================================================

class SynthGenerate(Operator):
    """Sample seeded scenes and write masks, features and sidecars"""
    idname = "synth-gen"
    label = "Generate Synthetic Dataset"

    def execute(self, context):
        config = context.config
        count = int(context.input("count", 100))
        if count < 1:
            raise ValidationError("count must be at least 1", key="count")
        dataset_dir = Path(context.run_dir) / "dataset"
        generate_dataset(dataset_dir, config.seed, count, config.scene, workers=int(context.input("workers", 1)))
        self.report({'INFO'}, f"Wrote {count} scenes to {dataset_dir}")
        return {'FINISHED'}
