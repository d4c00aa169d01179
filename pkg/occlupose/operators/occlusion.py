# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Per-joint occlusion labels: 0 truncated, 1 occluded, 2 visible.

A joint is visible when its pixel belongs to one of its own body parts, or
when its front surface (joint depth minus its largest incident radius) is
within the depth tolerance of the z-buffer at that pixel. Self, object and
person-person occlusion all come out of that single comparison.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ..bodytools import SKELETON, in_view, project
from ..errors import ValidationError
from .base import Operator
from .files import (get_masks_path, get_sidecar_path, get_targets_path, list_records, read_array_container,
                    read_bridge_file, require_input, write_array_container, write_bridge_file)
from .raster import MaskSet, body_primitives, cast_ray, scene_primitives

logger = logging.getLogger(__name__)

TRUNCATED, OCCLUDED, VISIBLE = 0, 1, 2
CYLINDER_RADIUS = 60.0


@dataclass(frozen=True, eq=False)
class OcclusionLabels:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1, len(SKELETON.joint_names))
        if labels.size and not np.isin(labels, (TRUNCATED, OCCLUDED, VISIBLE)).all():
            raise ValidationError("occlusion labels must lie in {0, 1, 2}")
        object.__setattr__(self, "labels", labels)

    def to_list(self):
        return self.labels.tolist()


def depth_tolerance(radius):
    return 0.25 * radius + 5.0


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def _joint_pixel(camera, point):
    if point[2] <= 0:
        return None
    uv = project(camera, point)
    if not in_view(camera, uv, point[2]):
        return None
    return uv


def classify_joints(scene, masks):
    camera = scene.camera
    if masks.shape != (camera.height, camera.width):
        raise ValidationError(f"mask shape {masks.shape} does not match the "
                              f"{camera.width}x{camera.height} camera")
    labels = np.zeros((len(scene.people), len(SKELETON.joint_names)), dtype=np.int64)
    for i, body in enumerate(scene.people):
        for j, point in enumerate(body.joints.joints):
            uv = _joint_pixel(camera, point)
            if uv is None:
                continue
            row, col = int(np.floor(uv[1])), int(np.floor(uv[0]))
            radius = body.own_radius(j)
            if masks.instance_map[row, col] == body.person_id and masks.part_map[row, col] in body.own_parts(j):
                labels[i, j] = VISIBLE
                continue
            front = point[2] - radius
            visible = front <= masks.depth_buffer[row, col] + depth_tolerance(radius)
            labels[i, j] = VISIBLE if visible else OCCLUDED
    return OcclusionLabels(labels)


def _oracle_label(primitives, camera, body, joint, radius=None):
    point = body.joints.joints[joint]
    uv = _joint_pixel(camera, point)
    if uv is None:
        return TRUNCATED
    own = set(body.own_parts(joint))
    nearest, _, _ = cast_ray(primitives, camera, uv,
                             skip=lambda prim: prim.owner == body.person_id and prim.part in own)
    radius = body.own_radius(joint) if radius is None else radius
    front = point[2] - radius
    return VISIBLE if front <= nearest + depth_tolerance(radius) else OCCLUDED


def ray_oracle(scene, person_id, joint_id):
    body = scene.people[person_id - 1]
    return _oracle_label(scene_primitives(scene), scene.camera, body, joint_id)


def cylinder_labels(scene, radius=CYLINDER_RADIUS):
    """Fixed-size cylinder baseline: self-occlusion only, every part the same radius."""
    labels = np.zeros((len(scene.people), len(SKELETON.joint_names)), dtype=np.int64)
    for i, body in enumerate(scene.people):
        prims = body_primitives(body, radius=radius)
        for j in range(len(SKELETON.joint_names)):
            labels[i, j] = _oracle_label(prims, scene.camera, body, j, radius=radius)
    return OcclusionLabels(labels)


def label_accuracy(pred, reference):
    pred = np.asarray(getattr(pred, "labels", pred))
    ref = np.asarray(getattr(reference, "labels", reference))
    if pred.shape != ref.shape:
        raise ValidationError(f"label shapes differ: {pred.shape} vs {ref.shape}")
    total = int(ref.size)
    tp = int(np.sum((pred == OCCLUDED) & (ref == OCCLUDED)))
    predicted = int(np.sum(pred == OCCLUDED))
    actual = int(np.sum(ref == OCCLUDED))
    return {
        "accuracy": float(np.mean(pred == ref)) if total else None,
        "occludedPrecision": tp / predicted if predicted else None,
        "occludedRecall": tp / actual if actual else None,
        "counts": {name: int(np.sum(ref == value))
                   for name, value in (("truncated", 0), ("occluded", 1), ("visible", 2))},
        "total": total,
    }


def occlusion_statistics(label_sets):
    stacked = [np.asarray(getattr(labels, "labels", labels)).reshape(-1) for labels in label_sets]
    flat = np.concatenate(stacked) if stacked else np.zeros(0, dtype=np.int64)
    n = max(flat.size, 1)
    return {
        "joints": int(flat.size),
        "truncated": float(np.sum(flat == TRUNCATED)) / n,
        "occluded": float(np.sum(flat == OCCLUDED)) / n,
        "visible": float(np.sum(flat == VISIBLE)) / n,
    }


def load_masks(dataset_dir, index):
    arrays, _ = read_array_container(get_masks_path(dataset_dir, index))
    return MaskSet(arrays["instance_map"], arrays["part_map"], arrays["depth_buffer"]), arrays["features"]


def label_record(dataset_dir, index, config, method="exact"):
    """Label one record, cache its targets and return (labels, exact labels)."""
    from .scenes import read_scene
    from .targets import build_target_arrays

    scene = read_scene(dataset_dir, index)
    masks, _ = load_masks(dataset_dir, index)
    exact = classify_joints(scene, masks)
    if method == "exact":
        labels = exact
    elif method == "cylinder":
        labels = cylinder_labels(scene)
    else:
        from .raster import rasterize
        from .shape_fit import fit_scene_bodies

        fitted = scene.with_people(fit_scene_bodies(scene, masks, config.shape_fit, config.ssf))
        labels = classify_joints(fitted, rasterize(fitted))
    arrays, manifest = build_target_arrays(scene, labels, config.targets)
    write_array_container(get_targets_path(dataset_dir, index), arrays)
    sidecar = read_bridge_file(get_sidecar_path(dataset_dir, index))
    sidecar["occlusionLabels"] = labels.to_list()
    sidecar["labelMethod"] = method
    sidecar["channels"] = manifest
    write_bridge_file(sidecar, get_sidecar_path(dataset_dir, index))
    return labels, exact


# =============================================================================
# OPERATORS
# =============================================================================

class LabelGenerate(Operator):
    """Write occlusion labels and cached target maps for every dataset record"""
    idname = "labelgen"
    label = "Generate Occlusion Labels"

    @classmethod
    def poll(cls, context):
        return context.input("method", "exact") in ("exact", "ssf", "cylinder")

    def execute(self, context):
        dataset_dir = require_input(context.input("dataset"), "dataset directory")
        method = context.input("method", "exact")
        produced, reference = [], []
        for index in tqdm(list_records(dataset_dir), desc="labelgen", disable=None):
            labels, exact = label_record(dataset_dir, index, context.config, method)
            produced.append(labels.labels)
            reference.append(exact.labels)
        stats = occlusion_statistics(produced)
        report = {"method": method, "statistics": stats}
        if method != "exact" and produced:
            report["accuracyVsExact"] = label_accuracy(np.concatenate(produced), np.concatenate(reference))
        write_bridge_file(report, Path(context.run_dir) / "metrics.json")
        self.report({'INFO'}, f"Labelled {len(produced)} records with '{method}': "
                              f"{stats['occluded'] * 100:.1f}% occluded, {stats['truncated'] * 100:.1f}% truncated")
        return {'FINISHED'}
