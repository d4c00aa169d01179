# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Parametric capsule body.

beta (10): head, neck, torso, upper-arm, forearm, thigh and shin radii in mm,
then the global bone-length scale and the shoulder- and hip-width scales.
theta (14 x 3): axis-angle rotation of every edge relative to its parent
edge's frame; theta = 0 is the template T-pose. Kinematics run in torch so
the same code serves rendering (numpy in, numpy out) and shape fitting
(autograd).
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from ..bodytools import EDGES, SKELETON, TEMPLATE_OFFSETS, Pose3D
from ..errors import ValidationError

BETA_NAMES = (
    "head_radius", "neck_radius", "torso_radius", "upper_arm_radius", "forearm_radius",
    "thigh_radius", "shin_radius", "bone_scale", "shoulder_scale", "hip_scale",
)
TEMPLATE_BETA = np.array([100.0, 50.0, 120.0, 50.0, 40.0, 70.0, 50.0, 1.0, 1.0, 1.0])
BETA_LOWER = np.array([20.0] * 7 + [0.7] * 3)
BETA_UPPER = np.array([200.0] * 7 + [1.3] * 3)

HEAD_SLOT = 0
# beta slot holding each edge's capsule radius
EDGE_RADIUS_SLOT = (2, 1, 3, 3, 4, 3, 3, 4, 5, 5, 6, 5, 5, 6)
# beta slot of the width scale applied on top of the bone scale, -1 for none
EDGE_WIDTH_SLOT = (-1, -1, 8, -1, -1, 8, -1, -1, 9, -1, -1, 9, -1, -1)

HEAD_PART = len(EDGES) + 1
NUM_PARTS = len(EDGES) + 1


@dataclass(frozen=True, eq=False)
class CapsuleShape:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.shape != (10,):
            raise ValidationError(f"beta must hold 10 values, got {beta.shape[0]}")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def template(cls, scale=1.0):
        beta = TEMPLATE_BETA.copy()
        beta[:7] *= scale
        beta[7] = scale
        return cls(beta)

    def check(self):
        bad = np.flatnonzero((self.beta < BETA_LOWER - 1e-9) | (self.beta > BETA_UPPER + 1e-9))
        if bad.size:
            name = BETA_NAMES[bad[0]]
            raise ValidationError(f"beta {name}={self.beta[bad[0]]:.4f} outside "
                                  f"[{BETA_LOWER[bad[0]]}, {BETA_UPPER[bad[0]]}]", key=name)
        return self

    def clamped(self):
        return CapsuleShape(np.clip(self.beta, BETA_LOWER, BETA_UPPER))


@dataclass(frozen=True, eq=False)
class CapsulePose:
    theta: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(len(EDGES), 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def rest(cls, translation=(0.0, 0.0, 0.0)):
        return cls(np.zeros((len(EDGES), 3)), np.asarray(translation, dtype=np.float64))

    def check(self):
        angles = np.linalg.norm(self.theta, axis=1)
        if np.any(angles > np.pi + 1e-9):
            raise ValidationError(f"edge rotation of {angles.max():.4f} rad exceeds pi")
        return self


@dataclass(frozen=True, eq=False)
class PosedBody:
    person_id: int
    shape: CapsuleShape
    pose: CapsulePose
    joints: Pose3D
    segments: np.ndarray
    radii: np.ndarray
    head_center: np.ndarray
    head_radius: float

    def own_parts(self, joint):
        """Part ids (1-based) whose primitives touch ``joint``."""
        parts = [e + 1 for e in SKELETON.incident_edges(joint)]
        if joint == SKELETON.index("head"):
            parts.append(HEAD_PART)
        return tuple(parts)

    def own_radius(self, joint):
        radii = [self.radii[p - 1] if p != HEAD_PART else self.head_radius for p in self.own_parts(joint)]
        return float(max(radii))


# =============================================================================
# KINEMATICS
# =============================================================================

def batch_rodrigues(rot_vecs):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    angle = torch.sqrt((rot_vecs ** 2).sum(-1, keepdim=True) + 1e-30)[..., None]
    x, y, z = rot_vecs[..., 0], rot_vecs[..., 1], rot_vecs[..., 2]
    zeros = torch.zeros_like(x)
    K = torch.stack([zeros, -z, y, z, zeros, -x, -y, x, zeros], dim=-1).reshape(rot_vecs.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=rot_vecs.dtype, device=rot_vecs.device).expand_as(K)
    return eye + (torch.sin(angle) / angle) * K + ((1.0 - torch.cos(angle)) / angle ** 2) * (K @ K)


def edge_scales(beta):
    """Per-edge length multiplier from the bone and width scales."""
    bone = beta[7]
    scales = []
    for slot in EDGE_WIDTH_SLOT:
        scales.append(bone * beta[slot] if slot >= 0 else bone)
    return torch.stack(scales)


def forward_kinematics(beta, theta, translation):
    """Returns joints (15, 3) and global edge rotations (14, 3, 3) as tensors."""
    rotations = batch_rodrigues(theta)
    offsets = torch.as_tensor(TEMPLATE_OFFSETS, dtype=theta.dtype) * edge_scales(beta)[:, None]
    parent_edge = SKELETON.parent_edge
    frames = [None] * len(EDGES)
    joints = [None] * len(SKELETON.joint_names)
    joints[0] = translation
    for e, (parent, child) in enumerate(EDGES):
        pe = parent_edge[parent]
        frames[e] = rotations[e] if pe < 0 else frames[pe] @ rotations[e]
        joints[child] = joints[parent] + frames[e] @ offsets[e]
    return torch.stack(joints), torch.stack(frames)


def capsule_radii(beta):
    slots = torch.as_tensor(EDGE_RADIUS_SLOT)
    return beta[slots], beta[HEAD_SLOT]


def pose_body(shape, pose, person_id=1):
    shape.check()
    pose.check()
    with torch.no_grad():
        beta = torch.as_tensor(shape.beta, dtype=torch.float64)
        joints, _ = forward_kinematics(beta,
                                       torch.as_tensor(pose.theta, dtype=torch.float64),
                                       torch.as_tensor(pose.translation, dtype=torch.float64))
    joints = joints.numpy()
    parents = np.array([p for p, _ in EDGES])
    children = np.array([c for _, c in EDGES])
    segments = np.stack([joints[parents], joints[children]], axis=1)
    radii = shape.beta[list(EDGE_RADIUS_SLOT)]
    head = SKELETON.index("head")
    return PosedBody(
        person_id=person_id,
        shape=shape,
        pose=pose,
        joints=Pose3D(joints, person_id),
        segments=segments,
        radii=radii,
        head_center=joints[head].copy(),
        head_radius=float(shape.beta[HEAD_SLOT]),
    )


def mirror_pose(pose):
    """Left/right mirror through the camera's YZ plane."""
    theta = np.empty_like(pose.theta)
    for e in range(len(EDGES)):
        rv = pose.theta[SKELETON.mirror_edge(e)]
        theta[e] = (rv[0], -rv[1], -rv[2])
    translation = pose.translation * np.array([-1.0, 1.0, 1.0])
    return CapsulePose(theta, translation)


def compose_rotvecs(outer, inner):
    """Axis-angle of ``outer`` applied after ``inner``, canonicalised to angle <= pi."""
    return (Rotation.from_rotvec(outer) * Rotation.from_rotvec(inner)).as_rotvec()
