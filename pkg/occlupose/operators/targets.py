# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Ground-truth maps at heatmap resolution (image pixels / 4).

Maps are built per person first, then composed: keypoint channels take the
per-cell maximum over people, PAF and root-depth channels keep the nearest
person. Keeping the per-person layer around lets the visible / occluded /
all split select joints and edges before any cross-person mixing.
"""

import logging
from dataclasses import dataclass

import numpy as np

from ..bodytools import EDGES, SKELETON, STRIDE, encode_depth, project_points
from ..errors import ValidationError
from ..props import FloatProperty
from .files import get_targets_path, read_array_container

logger = logging.getLogger(__name__)

NUM_JOINTS = len(SKELETON.joint_names)
NUM_EDGES = len(EDGES)
NUM_TORSO = len(SKELETON.torso_set)
PAF_CHANNELS = 3 * NUM_EDGES
SPLITS = ("all", "visible", "occluded")


@dataclass
class TargetConfig:
    sigma: float = FloatProperty(name="Keypoint Sigma", description="Gaussian spread in heatmap cells",
                                 default=2.0, min=0.1, max=20.0)
    limb_width: float = FloatProperty(name="Limb Width", description="PAF half-width in heatmap cells",
                                      default=1.5, min=0.1, max=20.0)
    root_radius: float = FloatProperty(name="Root Disc Radius", description="Root-depth disc radius in heatmap cells",
                                       default=2.0, min=0.1, max=20.0)


@dataclass(frozen=True, eq=False)
class HeatmapSet:
    """Keypoints (.., h, w, 15), PAFs (.., h, w, 42) and root depths (.., h, w, 7), channel last."""
    keypoints: object
    pafs: object
    root_depth: object
    paf_support: object = None
    root_support: object = None

    def __post_init__(self):
        kp, paf, root = self.keypoints.shape, self.pafs.shape, self.root_depth.shape
        if kp[-1] != NUM_JOINTS or paf[-1] not in (PAF_CHANNELS, 2 * NUM_EDGES) or root[-1] != NUM_TORSO:
            raise ValidationError(f"heatmap channels must be {NUM_JOINTS}/{PAF_CHANNELS}/{NUM_TORSO}, "
                                  f"got {kp[-1]}/{paf[-1]}/{root[-1]}")
        if kp[:-1] != paf[:-1] or kp[:-1] != root[:-1]:
            raise ValidationError(f"heatmap grids disagree: {kp[:-1]}, {paf[:-1]}, {root[:-1]}")

    @property
    def grid(self):
        return tuple(self.keypoints.shape[-3:-1])


@dataclass(frozen=True, eq=False)
class TargetBundle:
    all: HeatmapSet
    visible: HeatmapSet
    occluded: HeatmapSet


@dataclass(frozen=True, eq=False)
class PersonMaps:
    in_view: np.ndarray
    keypoints: np.ndarray
    pafs: np.ndarray
    paf_support: np.ndarray
    paf_key: np.ndarray
    root_depth: np.ndarray
    root_support: np.ndarray
    root_key: np.ndarray


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def heatmap_coords(camera, joints):
    """Heatmap-cell positions (15, 2) and the in-view mask (15,)."""
    joints = np.asarray(joints, dtype=np.float64)
    uv = project_points(camera, joints)
    ok = (np.isfinite(uv).all(axis=1) & (joints[:, 2] > 0)
          & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width) & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height))
    return uv / STRIDE, ok


def _grid(camera):
    w, h = camera.heatmap_size
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def gaussian_map(camera, x, y, sigma):
    """One joint's Gaussian, exactly 1 at its nearest cell, zero beyond 3 sigma."""
    w, h = camera.heatmap_size
    xs, ys = _grid(camera)
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    nx = min(max(int(np.floor(x + 0.5)), 0), w - 1)
    ny = min(max(int(np.floor(y + 0.5)), 0), h - 1)
    d0 = (nx - x) ** 2 + (ny - y) ** 2
    g = np.exp(-(d2 - d0) / (2.0 * sigma ** 2))
    g[d2 > (3.0 * sigma) ** 2] = 0.0
    g[ny, nx] = 1.0
    return g


def limb_field(camera, a, b, limb_width):
    """Support mask, unit direction and position along the limb for the segment a->b."""
    xs, ys = _grid(camera)
    ab = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    length = float(np.hypot(ab[0], ab[1]))
    px, py = xs - a[0], ys - a[1]
    if length < 1e-9:
        return np.hypot(px, py) <= limb_width, np.zeros(2), np.zeros_like(xs)
    t = np.clip((px * ab[0] + py * ab[1]) / (length * length), 0.0, 1.0)
    dist = np.hypot(px - t * ab[0], py - t * ab[1])
    return dist <= limb_width, ab / length, t


def person_maps(pose, camera, config):
    joints = np.asarray(getattr(pose, "joints", pose), dtype=np.float64)
    w, h = camera.heatmap_size
    coords, in_view = heatmap_coords(camera, joints)
    keypoints = np.zeros((h, w, NUM_JOINTS))
    for j in np.flatnonzero(in_view):
        keypoints[..., j] = gaussian_map(camera, coords[j, 0], coords[j, 1], config.sigma)
    pafs = np.zeros((h, w, PAF_CHANNELS))
    paf_support = np.zeros((h, w, NUM_EDGES), dtype=bool)
    paf_key = np.full((h, w, NUM_EDGES), np.inf)
    for e, (parent, child) in enumerate(EDGES):
        if not (in_view[parent] and in_view[child]):
            continue
        support, direction, t = limb_field(camera, coords[parent], coords[child], config.limb_width)
        if not direction.any():
            logger.debug("edge %d projects to a point; writing depth only", e)
        dz = joints[child, 2] - joints[parent, 2]
        pafs[..., 3 * e][support] = direction[0]
        pafs[..., 3 * e + 1][support] = direction[1]
        pafs[..., 3 * e + 2][support] = dz
        paf_support[..., e] = support
        paf_key[..., e][support] = (joints[parent, 2] + t * dz)[support]
    root = np.zeros((h, w, NUM_TORSO))
    root_support = np.zeros((h, w, NUM_TORSO), dtype=bool)
    xs, ys = _grid(camera)
    for k, j in enumerate(SKELETON.torso_set):
        if not in_view[j]:
            continue
        x, y = coords[j]
        disc = np.hypot(xs - x, ys - y) <= config.root_radius
        disc[min(max(int(np.floor(y + 0.5)), 0), h - 1), min(max(int(np.floor(x + 0.5)), 0), w - 1)] = True
        root[..., k][disc] = encode_depth(camera, joints[j, 2])
        root_support[..., k] = disc
    root_key = joints[list(SKELETON.torso_set), 2].copy()
    return PersonMaps(in_view, keypoints, pafs, paf_support, paf_key, root, root_support, root_key)


def compose_maps(people, joint_select, edge_select, shape):
    """Cross-person composition of the selected joints and edges into one HeatmapSet."""
    h, w = shape
    keypoints = np.zeros((h, w, NUM_JOINTS))
    pafs = np.zeros((h, w, PAF_CHANNELS))
    paf_support = np.zeros((h, w, NUM_EDGES), dtype=bool)
    paf_best = np.full((h, w, NUM_EDGES), np.inf)
    root = np.zeros((h, w, NUM_TORSO))
    root_support = np.zeros((h, w, NUM_TORSO), dtype=bool)
    root_best = np.full((h, w, NUM_TORSO), np.inf)
    torso = list(SKELETON.torso_set)
    for maps, joints_on, edges_on in zip(people, joint_select, edge_select):
        for j in np.flatnonzero(joints_on & maps.in_view):
            np.maximum(keypoints[..., j], maps.keypoints[..., j], out=keypoints[..., j])
        for e in np.flatnonzero(edges_on):
            take = maps.paf_support[..., e] & (maps.paf_key[..., e] < paf_best[..., e])
            for c in range(3):
                pafs[..., 3 * e + c][take] = maps.pafs[..., 3 * e + c][take]
            paf_best[..., e][take] = maps.paf_key[..., e][take]
            paf_support[..., e] |= maps.paf_support[..., e]
        for k, j in enumerate(torso):
            if not (joints_on[j] and maps.in_view[j]):
                continue
            take = maps.root_support[..., k] & (maps.root_key[k] < root_best[..., k])
            root[..., k][take] = maps.root_depth[..., k][take]
            root_best[..., k][take] = maps.root_key[k]
            root_support[..., k] |= maps.root_support[..., k]
    return HeatmapSet(keypoints, pafs, root, paf_support, root_support)


def _grid_shape(camera):
    w, h = camera.heatmap_size
    return (h, w)


def _everyone(people):
    return [m.in_view.copy() for m in people], [edge_mask_from_joints(m.in_view) for m in people]


def edge_mask_from_joints(joints_on):
    return np.array([joints_on[p] and joints_on[c] for p, c in EDGES], dtype=bool)


def make_keypoint_maps(poses, camera, sigma):
    if not sigma > 0:
        raise ValidationError("sigma must be positive", key="targets.sigma")
    config = TargetConfig(sigma=sigma)
    people = [person_maps(p, camera, config) for p in poses]
    return compose_maps(people, *_everyone(people), _grid_shape(camera)).keypoints


def make_paf_maps(poses, camera, limb_width):
    if not limb_width > 0:
        raise ValidationError("limb width must be positive", key="targets.limb_width")
    config = TargetConfig(limb_width=limb_width)
    people = [person_maps(p, camera, config) for p in poses]
    return compose_maps(people, *_everyone(people), _grid_shape(camera)).pafs


def make_root_depth_maps(poses, camera, radius=2.0):
    config = TargetConfig(root_radius=radius)
    people = [person_maps(p, camera, config) for p in poses]
    return compose_maps(people, *_everyone(people), _grid_shape(camera)).root_depth


def split_selections(labels):
    """Per-person (joint, edge) selections for the all / visible / occluded splits."""
    labels = np.asarray(getattr(labels, "labels", labels))
    out = {name: ([], []) for name in SPLITS}
    for row in labels:
        parent = row[[p for p, _ in EDGES]]
        child = row[[c for _, c in EDGES]]
        kept = (parent != 0) & (child != 0)
        out["all"][0].append(row != 0)
        out["all"][1].append(kept)
        out["visible"][0].append(row == 2)
        out["visible"][1].append((parent == 2) & (child == 2))
        out["occluded"][0].append(row == 1)
        out["occluded"][1].append(kept & ((parent == 1) | (child == 1)))
    return out


def split_by_visibility(people, labels, shape=None):
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.shape != (len(people), NUM_JOINTS):
        raise ValidationError(f"labels of shape {labels.shape} do not match {len(people)} people")
    if shape is None:
        if not people:
            raise ValidationError("grid shape is required for an empty scene")
        shape = people[0].keypoints.shape[:2]
    selections = split_selections(labels)
    maps = {name: compose_maps(people, joints, edges, shape) for name, (joints, edges) in selections.items()}
    return TargetBundle(maps["all"], maps["visible"], maps["occluded"])


def root_samples(poses, labels, camera, classes=(2,)):
    """(channel, row, col, normalised depth) at the nearest cell of each selected torso joint."""
    labels = np.asarray(getattr(labels, "labels", labels))
    w, h = camera.heatmap_size
    rows = []
    for pose, row in zip(poses, labels):
        joints = np.asarray(getattr(pose, "joints", pose), dtype=np.float64)
        coords, in_view = heatmap_coords(camera, joints)
        for k, j in enumerate(SKELETON.torso_set):
            if not in_view[j] or row[j] not in classes:
                continue
            x, y = coords[j]
            rows.append((k, min(int(np.floor(y + 0.5)), h - 1), min(int(np.floor(x + 0.5)), w - 1),
                         encode_depth(camera, joints[j, 2])))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def channel_manifest():
    names = SKELETON.joint_names
    return {
        "layout": "h, w, C",
        "keypoints": list(names),
        "pafs": [f"{names[p]}->{names[c]}:{axis}" for p, c in EDGES for axis in ("x", "y", "dz")],
        "rootDepth": [names[j] for j in SKELETON.torso_set],
    }


def build_target_arrays(scene, labels, config):
    people = [person_maps(body.joints, scene.camera, config) for body in scene.people]
    bundle = split_by_visibility(people, labels, _grid_shape(scene.camera))
    arrays = {"labels": np.asarray(labels.labels, dtype=np.int64)}
    for name in SPLITS:
        maps = getattr(bundle, name)
        arrays[f"{name}_keypoints"] = maps.keypoints.astype(np.float32)
        arrays[f"{name}_pafs"] = maps.pafs.astype(np.float32)
        arrays[f"{name}_root_depth"] = maps.root_depth.astype(np.float32)
        arrays[f"{name}_paf_support"] = maps.paf_support
        arrays[f"{name}_root_support"] = maps.root_support
    arrays["root_samples_visible"] = root_samples(scene.poses, labels, scene.camera, classes=(2,))
    arrays["root_samples_all"] = root_samples(scene.poses, labels, scene.camera, classes=(1, 2))
    return arrays, channel_manifest()


def bundle_from_arrays(arrays):
    def split(name):
        return HeatmapSet(arrays[f"{name}_keypoints"], arrays[f"{name}_pafs"], arrays[f"{name}_root_depth"],
                          arrays[f"{name}_paf_support"], arrays[f"{name}_root_support"])
    return TargetBundle(split("all"), split("visible"), split("occluded"))


def load_targets(dataset_dir, index):
    arrays, _ = read_array_container(get_targets_path(dataset_dir, index))
    return bundle_from_arrays(arrays), arrays
