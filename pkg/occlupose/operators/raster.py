# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Analytic ray casting of capsules, spheres and axis-aligned boxes.

Rays leave the camera centre with direction ((u - cx)/f, (v - cy)/f, 1), so
the ray parameter of a hit is its camera depth Z. Capsules are intersected as
the union of a finite cylinder and two end spheres; the first hit of the union
is the nearest valid hit of its pieces. Dot products are spelled out per
component so a single ray and a ray batch give bit-identical depths.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .capsules import HEAD_PART

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Primitive:
    kind: str
    owner: int
    part: int
    params: tuple


@dataclass(frozen=True, eq=False)
class MaskSet:
    instance_map: np.ndarray
    part_map: np.ndarray
    depth_buffer: np.ndarray

    @property
    def shape(self):
        return self.instance_map.shape


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def ray_directions(camera, us, vs):
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    return np.stack([(us - camera.cx) / camera.focal, (vs - camera.cy) / camera.focal, np.ones_like(us)], axis=-1)


def intersect_sphere(dirs, center, radius):
    """Entry depth of each ray into the sphere, inf on a miss."""
    c = np.asarray(center, dtype=np.float64)
    a = _dot(dirs, dirs)
    b = _dot(dirs, c)
    cc = float(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) - radius * radius
    disc = b * b - a * cc
    hit = disc >= 0.0
    t = np.full(a.shape, np.inf)
    t[hit] = (b[hit] - np.sqrt(disc[hit])) / a[hit]
    t[t <= 0.0] = np.inf
    return t


def intersect_capsule(dirs, p0, p1, radius):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    t = np.minimum(intersect_sphere(dirs, p0, radius), intersect_sphere(dirs, p1, radius))
    axis = p1 - p0
    length = float(np.sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]))
    if length < 1e-12:
        return t
    axis = axis / length
    w = -p0
    d_ax = _dot(dirs, axis)
    w_ax = float(w[0] * axis[0] + w[1] * axis[1] + w[2] * axis[2])
    d_perp = dirs - d_ax[..., None] * axis
    w_perp = w - w_ax * axis
    qa = _dot(d_perp, d_perp)
    qb = 2.0 * _dot(d_perp, w_perp)
    qc = float(w_perp[0] * w_perp[0] + w_perp[1] * w_perp[1] + w_perp[2] * w_perp[2]) - radius * radius
    disc = qb * qb - 4.0 * qa * qc
    hit = (disc >= 0.0) & (qa > 1e-18)
    tc = np.full(qa.shape, np.inf)
    tc[hit] = (-qb[hit] - np.sqrt(disc[hit])) / (2.0 * qa[hit])
    s = tc * d_ax + w_ax
    tc[(s < 0.0) | (s > length) | (tc <= 0.0)] = np.inf
    return np.minimum(t, tc)


def intersect_box(dirs, center, half):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    t_near = np.full(dirs.shape[:-1], -np.inf)
    t_far = np.full(dirs.shape[:-1], np.inf)
    for axis in range(3):
        d = dirs[..., axis]
        lo, hi = center[axis] - half[axis], center[axis] + half[axis]
        parallel = np.abs(d) < 1e-15
        outside = parallel & ((0.0 < lo) | (0.0 > hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(parallel, -np.inf, lo / d)
            t2 = np.where(parallel, np.inf, hi / d)
        t_near = np.maximum(t_near, np.minimum(t1, t2))
        t_far = np.minimum(t_far, np.maximum(t1, t2))
        t_far[outside] = -np.inf
    t = np.where((t_near <= t_far) & (t_near > 0.0), t_near, np.inf)
    return t


def intersect(primitive, dirs):
    if primitive.kind == "capsule":
        return intersect_capsule(dirs, *primitive.params)
    if primitive.kind == "sphere":
        return intersect_sphere(dirs, *primitive.params)
    return intersect_box(dirs, *primitive.params)


def body_primitives(body, radius=None):
    """The 14 capsules and head sphere of a posed body. ``radius`` forces one size for all."""
    prims = []
    for e, (p0, p1) in enumerate(body.segments):
        r = float(body.radii[e]) if radius is None else float(radius)
        prims.append(Primitive("capsule", body.person_id, e + 1, (p0, p1, r)))
    r = body.head_radius if radius is None else float(radius)
    prims.append(Primitive("sphere", body.person_id, HEAD_PART, (body.head_center, r)))
    return prims


def scene_primitives(scene):
    prims = []
    for body in scene.people:
        prims.extend(body_primitives(body))
    for k, occluder in enumerate(scene.occluders):
        if occluder.kind == "sphere":
            prims.append(Primitive("sphere", -(k + 1), 0, (occluder.center, float(occluder.size[0]))))
        else:
            prims.append(Primitive("box", -(k + 1), 0, (occluder.center, occluder.size)))
    return prims


def _bounds(primitive):
    if primitive.kind == "capsule":
        p0, p1, r = primitive.params
        return np.minimum(p0, p1) - r, np.maximum(p0, p1) + r
    if primitive.kind == "sphere":
        c, r = primitive.params
        return c - r, c + r
    c, h = primitive.params
    return c - h, c + h


def screen_window(camera, primitive):
    """Conservative (row0, row1, col0, col1) pixel window covering the primitive."""
    lo, hi = _bounds(primitive)
    if lo[2] <= 1e-6:
        return 0, camera.height, 0, camera.width
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    u = camera.focal * corners[:, 0] / corners[:, 2] + camera.cx
    v = camera.focal * corners[:, 1] / corners[:, 2] + camera.cy
    col0 = max(int(np.floor(u.min())) - 1, 0)
    col1 = min(int(np.ceil(u.max())) + 1, camera.width)
    row0 = max(int(np.floor(v.min())) - 1, 0)
    row1 = min(int(np.ceil(v.max())) + 1, camera.height)
    return row0, max(row1, row0), col0, max(col1, col0)


def rasterize(scene):
    camera = scene.camera
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    instance = np.zeros((H, W), dtype=np.int32)
    part = np.zeros((H, W), dtype=np.int16)
    for prim in scene_primitives(scene):
        r0, r1, c0, c1 = screen_window(camera, prim)
        if r1 <= r0 or c1 <= c0:
            continue
        vs, us = np.meshgrid(np.arange(r0, r1) + 0.5, np.arange(c0, c1) + 0.5, indexing="ij")
        t = intersect(prim, ray_directions(camera, us, vs))
        window = depth[r0:r1, c0:c1]
        nearer = t < window
        window[nearer] = t[nearer]
        instance[r0:r1, c0:c1][nearer] = prim.owner
        part[r0:r1, c0:c1][nearer] = prim.part if prim.owner > 0 else 0
    return MaskSet(instance, part, depth)


def cast_ray(primitives, camera, pixel, skip=lambda prim: False):
    """Nearest (depth, owner, part) along the ray through ``pixel``; (inf, 0, 0) on a miss."""
    dirs = ray_directions(camera, np.array([pixel[0]]), np.array([pixel[1]]))
    best = (np.inf, 0, 0)
    for prim in primitives:
        if skip(prim):
            continue
        t = float(intersect(prim, dirs)[0])
        if t < best[0]:
            best = (t, prim.owner, prim.part if prim.owner > 0 else 0)
    return best


def render_features(scene, masks=None):
    """
    Four-channel input rendering in [0, 1]:
        0 depth min-max normalised over person pixels
        1 person indicator
        2 body part id / 15
        3 silhouette edges of every instance, occluders included
    """
    if masks is None:
        masks = rasterize(scene)
    H, W = masks.shape
    features = np.zeros((H, W, 4), dtype=np.float32)
    person = masks.instance_map > 0
    if person.any():
        d = masks.depth_buffer[person]
        lo, hi = d.min(), d.max()
        features[..., 0][person] = (d - lo) / (hi - lo) if hi > lo else 0.0
        features[..., 1][person] = 1.0
        features[..., 2][person] = masks.part_map[person] / float(HEAD_PART)
    inst = masks.instance_map
    edge = np.zeros((H, W), dtype=bool)
    edge[1:, :] |= inst[1:, :] != inst[:-1, :]
    edge[:-1, :] |= inst[:-1, :] != inst[1:, :]
    edge[:, 1:] |= inst[:, 1:] != inst[:, :-1]
    edge[:, :-1] |= inst[:, :-1] != inst[:, 1:]
    features[..., 3][edge] = 1.0
    return features
