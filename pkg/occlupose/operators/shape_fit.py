# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Skeleton-guided shape fitting of the capsule body.

Given a 3D skeleton and an instance mask, ``shape_init`` reads radii and
scales off the bone lengths, ``skeleton_to_pose`` solves the edge rotations
in closed form, and ``optimize_shape`` polishes both against the joint and
silhouette terms of ``loss_hs``. The silhouette is rendered soft: each
primitive's projected signed distance goes through a sigmoid and the parts
are merged with a probabilistic union.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from ..bodytools import EDGES, SKELETON, TEMPLATE_OFFSETS
from ..errors import ConvergenceError, NumericError, ValidationError
from ..props import FloatProperty, IntProperty
from .capsules import (BETA_LOWER, BETA_UPPER, TEMPLATE_BETA, CapsulePose, CapsuleShape, capsule_radii,
                       forward_kinematics, pose_body)

logger = logging.getLogger(__name__)

_PARENTS = torch.tensor([p for p, _ in EDGES])
_CHILDREN = torch.tensor([c for _, c in EDGES])
_HEAD = SKELETON.index("head")


@dataclass
class SSFWeights:
    lambda_beta: float = FloatProperty(name="Shape Weight", description="Weight of the supervised shape term",
                                       default=1.0, min=0.0)
    lambda_theta: float = FloatProperty(name="Pose Weight", description="Weight of the supervised pose term",
                                        default=1.0, min=0.0)
    lambda_pos: float = FloatProperty(name="Joint Weight", description="Weight of the joint position term (per mm^2)",
                                      default=1e-4, min=0.0)
    lambda_sil: float = FloatProperty(name="Silhouette Weight", description="Weight of the silhouette term",
                                      default=10.0, min=0.0)

    def check(self):
        for name in ("lambda_beta", "lambda_theta", "lambda_pos", "lambda_sil"):
            if getattr(self, name) < 0:
                raise ValidationError(f"ssf.{name} must be non-negative", key=f"ssf.{name}")
        return self


@dataclass
class ShapeFitConfig:
    iterations: int = IntProperty(name="Iterations", description="Optimizer steps per person", default=100, min=1)
    lr_radius: float = FloatProperty(name="Radius Step", description="Adam step size for radii (mm)",
                                     default=2.0, min=0.0)
    lr_scale: float = FloatProperty(name="Scale Step", description="Adam step size for bone and width scales",
                                    default=0.005, min=0.0)
    lr_theta: float = FloatProperty(name="Rotation Step", description="Adam step size for edge rotations (rad)",
                                    default=0.01, min=0.0)
    lr_translation: float = FloatProperty(name="Translation Step", description="Adam step size for root translation (mm)",
                                          default=5.0, min=0.0)
    sharpness: float = FloatProperty(name="Silhouette Sharpness",
                                     description="Sigmoid width of the soft silhouette edge (px)",
                                     default=0.5, min=1e-3, max=10.0)
    divergence_tolerance: float = FloatProperty(name="Divergence Tolerance",
                                                description="Relative rise above the best loss counted as divergence",
                                                default=0.5, min=0.0)
    window_padding: int = IntProperty(name="Window Padding",
                                      description="Pixels added around the person when rendering silhouettes",
                                      default=12, min=0)


# =============================================================================
# INITIALISATION
# =============================================================================

def shape_init(pose):
    joints = np.asarray(getattr(pose, "joints", pose), dtype=np.float64)
    idx = SKELETON.index
    torso = np.linalg.norm(joints[idx("neck")] - joints[idx("pelvis")])
    if not torso > 1e-9:
        raise ValidationError("cannot initialise a shape from a zero-length torso")
    scale = torso / np.linalg.norm(TEMPLATE_OFFSETS[0])
    shoulders = np.linalg.norm(joints[idx("l_shoulder")] - joints[idx("r_shoulder")])
    hips = np.linalg.norm(joints[idx("l_hip")] - joints[idx("r_hip")])
    beta = TEMPLATE_BETA.copy()
    beta[:7] *= scale
    beta[7] = scale
    beta[8] = shoulders / (2.0 * abs(TEMPLATE_OFFSETS[2][0]) * scale)
    beta[9] = hips / (2.0 * abs(TEMPLATE_OFFSETS[8][0]) * scale)
    return CapsuleShape(np.clip(beta, BETA_LOWER, BETA_UPPER))


def _swing(a, b):
    """Smallest rotation vector turning unit vector ``a`` onto unit vector ``b``."""
    cross = np.cross(a, b)
    s = np.linalg.norm(cross)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0:
            return np.zeros(3)
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        return axis / np.linalg.norm(axis) * np.pi
    return cross / s * np.arctan2(s, c)


def skeleton_to_pose(pose, shape):
    joints = np.asarray(getattr(pose, "joints", pose), dtype=np.float64)
    parent_edge = SKELETON.parent_edge
    theta = np.zeros((len(EDGES), 3))
    frames = [None] * len(EDGES)
    for e, (parent, child) in enumerate(EDGES):
        bone = joints[child] - joints[parent]
        length = np.linalg.norm(bone)
        if not length > 1e-9:
            raise ValidationError(f"bone {SKELETON.joint_names[parent]}->{SKELETON.joint_names[child]} has zero length")
        pe = parent_edge[parent]
        outer = np.eye(3) if pe < 0 else frames[pe]
        template = TEMPLATE_OFFSETS[e] / np.linalg.norm(TEMPLATE_OFFSETS[e])
        theta[e] = _swing(template, outer.T @ (bone / length))
        frames[e] = outer @ Rotation.from_rotvec(theta[e]).as_matrix()
    return CapsulePose(theta, joints[0].copy())


# =============================================================================
# SILHOUETTE AND OBJECTIVE
# =============================================================================

def pixel_window(camera, joints, pad):
    """(row0, row1, col0, col1) around the projected joints, clipped to the image."""
    joints = np.asarray(joints, dtype=np.float64)
    z = np.maximum(joints[:, 2], 1e-6)
    u = camera.focal * joints[:, 0] / z + camera.cx
    v = camera.focal * joints[:, 1] / z + camera.cy
    reach = camera.focal * BETA_UPPER[0] / z.min() + pad
    col0 = int(np.clip(np.floor(u.min() - reach), 0, camera.width))
    col1 = int(np.clip(np.ceil(u.max() + reach), 0, camera.width))
    row0 = int(np.clip(np.floor(v.min() - reach), 0, camera.height))
    row1 = int(np.clip(np.ceil(v.max() + reach), 0, camera.height))
    return row0, max(row1, row0), col0, max(col1, col0)


def _project(camera, points):
    return torch.stack([camera.focal * points[:, 0] / points[:, 2] + camera.cx,
                        camera.focal * points[:, 1] / points[:, 2] + camera.cy], dim=-1)


def silhouette_sdf(beta, theta, translation, camera, window=None):
    """Signed pixel distance to the nearest projected primitive over the window grid."""
    joints, _ = forward_kinematics(beta, theta, translation)
    radii, head_radius = capsule_radii(beta)
    r0, r1, c0, c1 = window or (0, camera.height, 0, camera.width)
    vs, us = torch.meshgrid(torch.arange(r0, r1, dtype=beta.dtype) + 0.5,
                            torch.arange(c0, c1, dtype=beta.dtype) + 0.5, indexing="ij")
    grid = torch.stack([us.reshape(-1), vs.reshape(-1)], dim=-1)[:, None, :]
    a3, b3 = joints[_PARENTS], joints[_CHILDREN]
    a, b = _project(camera, a3), _project(camera, b3)
    ra = camera.focal * radii / a3[:, 2]
    rb = camera.focal * radii / b3[:, 2]
    ab = b - a
    t = (((grid - a) * ab).sum(-1) / ((ab ** 2).sum(-1) + 1e-12)).clamp(0.0, 1.0)
    closest = a + t[..., None] * ab
    dist = torch.sqrt(((grid - closest) ** 2).sum(-1) + 1e-12)
    capsules = dist - (ra + t * (rb - ra))
    head = joints[_HEAD]
    centre = _project(camera, head[None])[0]
    head_sdf = torch.sqrt(((grid[:, 0] - centre) ** 2).sum(-1) + 1e-12) - camera.focal * head_radius / head[2]
    sdf = torch.cat([capsules, head_sdf[:, None]], dim=1)
    return sdf.reshape(r1 - r0, c1 - c0, -1)


def soft_silhouette(beta, theta, translation, camera, sharpness=0.5, window=None):
    sdf = silhouette_sdf(beta, theta, translation, camera, window)
    occupancy = torch.sigmoid(-sdf / sharpness)
    return 1.0 - torch.prod(1.0 - occupancy, dim=-1)


def hard_silhouette(shape, pose, camera):
    with torch.no_grad():
        sdf = silhouette_sdf(torch.as_tensor(shape.beta, dtype=torch.float64),
                             torch.as_tensor(pose.theta, dtype=torch.float64),
                             torch.as_tensor(pose.translation, dtype=torch.float64), camera)
    return (sdf.min(dim=-1).values <= 0).numpy()


def silhouette_iou(shape, pose, mask, camera):
    model = hard_silhouette(shape, pose, camera)
    mask = np.asarray(mask) > 0.5
    union = np.sum(model | mask)
    return float(np.sum(model & mask) / union) if union else 1.0


def _tensor(value, dtype=torch.float64):
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=dtype)


def _unpack(shape, pose_params):
    beta = _tensor(getattr(shape, "beta", shape))
    if isinstance(pose_params, CapsulePose):
        return beta, _tensor(pose_params.theta), _tensor(pose_params.translation)
    theta, translation = pose_params
    return beta, _tensor(theta), _tensor(translation)


def loss_hs(shape, pose_params, target_pose, person_mask, camera, weights,
            gt_shape=None, gt_pose_params=None, valid_mask=None, sharpness=0.5, window=None):
    """
    Weighted sum of the shape, pose, joint and silhouette terms.

    The shape and pose terms only enter when ground truth is given. The
    silhouette term is the mean squared difference between the soft model
    silhouette and ``person_mask`` over the window, restricted to
    ``valid_mask`` when one is passed. Returns (total, {term: value}).
    """
    weights.check()
    beta, theta, translation = _unpack(shape, pose_params)
    terms = {}
    zero = beta.sum() * 0.0
    if gt_shape is not None:
        terms["beta"] = torch.linalg.vector_norm(beta - _tensor(getattr(gt_shape, "beta", gt_shape)))
    else:
        terms["beta"] = zero
    if gt_pose_params is not None:
        gt_theta = gt_pose_params.theta if isinstance(gt_pose_params, CapsulePose) else gt_pose_params
        terms["theta"] = torch.linalg.vector_norm(theta - _tensor(gt_theta))
    else:
        terms["theta"] = zero
    joints, _ = forward_kinematics(beta, theta, translation)
    target = _tensor(getattr(target_pose, "joints", target_pose))
    terms["pose"] = ((joints - target) ** 2).sum()
    if weights.lambda_sil > 0:
        r0, r1, c0, c1 = window or (0, camera.height, 0, camera.width)
        soft = soft_silhouette(beta, theta, translation, camera, sharpness, (r0, r1, c0, c1))
        mask = _tensor(person_mask)[r0:r1, c0:c1]
        residual = (soft - mask) ** 2
        if valid_mask is not None:
            valid = _tensor(valid_mask)[r0:r1, c0:c1]
            terms["silhouette"] = (residual * valid).sum() / valid.sum().clamp(min=1.0)
        else:
            terms["silhouette"] = residual.mean()
    else:
        terms["silhouette"] = zero
    total = (weights.lambda_beta * terms["beta"] + weights.lambda_theta * terms["theta"]
             + weights.lambda_pos * terms["pose"] + weights.lambda_sil * terms["silhouette"])
    return total, terms


def optimize_shape(init_shape, init_pose_params, target_pose, person_mask, camera, weights, iters,
                   config=None, valid_mask=None):
    """Adam on the weakly supervised terms, keeping beta inside its bounds. Returns the best iterate."""
    if iters < 1:
        raise ValidationError("shape optimisation needs at least one iteration", key="shape_fit.iterations")
    weights.check()
    config = config or ShapeFitConfig()
    if weights.lambda_pos == 0 and weights.lambda_sil == 0:
        return init_shape, init_pose_params
    weak = SSFWeights(lambda_beta=0.0, lambda_theta=0.0, lambda_pos=weights.lambda_pos, lambda_sil=weights.lambda_sil)
    target = np.asarray(getattr(target_pose, "joints", target_pose), dtype=np.float64)
    window = pixel_window(camera, target, config.window_padding)
    radii = torch.tensor(init_shape.beta[:7], dtype=torch.float64, requires_grad=True)
    scales = torch.tensor(init_shape.beta[7:], dtype=torch.float64, requires_grad=True)
    theta = torch.tensor(init_pose_params.theta, dtype=torch.float64, requires_grad=True)
    translation = torch.tensor(init_pose_params.translation, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([
        {"params": [radii], "lr": config.lr_radius},
        {"params": [scales], "lr": config.lr_scale},
        {"params": [theta], "lr": config.lr_theta},
        {"params": [translation], "lr": config.lr_translation},
    ])
    lower = torch.as_tensor(BETA_LOWER)
    upper = torch.as_tensor(BETA_UPPER)

    def evaluate():
        beta = torch.cat([radii, scales])
        total, _ = loss_hs(beta, (theta, translation), target, person_mask, camera, weak,
                           valid_mask=valid_mask, sharpness=config.sharpness, window=window)
        return total

    def snapshot():
        beta = torch.cat([radii, scales]).detach().numpy().copy()
        return CapsuleShape(beta), CapsulePose(theta.detach().numpy().copy(), translation.detach().numpy().copy())

    best_loss, best = None, None
    rising = 0
    initial = None
    for step in range(iters + 1):
        optimizer.zero_grad()
        total = evaluate()
        value = float(total.detach())
        if not np.isfinite(value):
            raise NumericError("shape fitting produced a non-finite loss", {"step": step, "loss": value})
        if initial is None:
            initial = value
        if best_loss is None or value < best_loss:
            best_loss, best = value, snapshot()
            rising = 0
        elif value > best_loss * (1.0 + config.divergence_tolerance) + 1e-12:
            rising += 1
            if rising >= 10:
                raise ConvergenceError("shape fitting diverged", {
                    "step": step, "loss": value, "bestLoss": best_loss, "initialLoss": initial})
        else:
            rising = 0
        if step == iters:
            break
        total.backward()
        optimizer.step()
        with torch.no_grad():
            radii.copy_(torch.maximum(torch.minimum(radii, upper[:7]), lower[:7]))
            scales.copy_(torch.maximum(torch.minimum(scales, upper[7:]), lower[7:]))
    logger.debug("shape fit: loss %.6g -> %.6g over %d steps", initial, best_loss, iters)
    return best


def fit_scene_bodies(scene, masks, config, weights):
    """Refit every person from their skeleton and instance mask; returns new posed bodies."""
    fitted = []
    for body in scene.people:
        target = body.joints
        shape = shape_init(target)
        pose = skeleton_to_pose(target, shape)
        person_mask = (masks.instance_map == body.person_id).astype(np.float64)
        valid = ((masks.instance_map == 0) | (masks.instance_map == body.person_id)).astype(np.float64)
        shape, pose = optimize_shape(shape, pose, target, person_mask, scene.camera, weights,
                                     config.iterations, config, valid_mask=valid)
        pose = CapsulePose(Rotation.from_rotvec(pose.theta).as_rotvec(), pose.translation)
        fitted.append(pose_body(shape.clamped(), pose, body.person_id))
    return fitted
