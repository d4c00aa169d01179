# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Root-relative pose completion.

A small MLP sees pelvis-relative joints divided by the torso length plus the
presence mask, and predicts a residual per joint. Present joints move at most
the trust radius; missing joints take the prediction and are then pulled to
plausible bone lengths walking the tree from the pelvis.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..bodytools import SKELETON, TEMPLATE_OFFSETS, Pose3D
from ..props import FloatProperty, IntProperty
from .assembly import REFINED, TEMPLATE_BONES
from .base import Operator
from .capsules import CapsulePose, pose_body
from .files import read_checkpoint, write_bridge_file, write_checkpoint
from .scenes import sample_shape, sample_theta
from .training import LossCurve, guard_finite, seed_everything

logger = logging.getLogger(__name__)

NECK = SKELETON.index("neck")
TEMPLATE_TORSO = float(TEMPLATE_BONES[SKELETON.parent_edge[NECK]])
TEMPLATE_DIRECTIONS = TEMPLATE_OFFSETS / TEMPLATE_BONES[:, None]


@dataclass
class RefineConfig:
    hidden: int = IntProperty(name="Hidden Width", description="Units per hidden layer", default=256, min=8, max=4096)
    layers: int = IntProperty(name="Hidden Layers", description="Number of hidden layers", default=2, min=1, max=8)
    trust_radius: float = FloatProperty(name="Trust Radius", description="Largest move (mm) applied to a present joint",
                                        default=50.0, min=0.0)
    min_joints: int = IntProperty(name="Min Joints", description="Fewer present joints pass through unchanged",
                                  default=8, min=1, max=15)
    bone_min: float = FloatProperty(name="Bone Min", description="Shortest imputed bone as a fraction of the template",
                                    default=0.5, min=0.0)
    bone_max: float = FloatProperty(name="Bone Max", description="Longest imputed bone as a fraction of the template",
                                    default=2.0, min=0.0)
    dropout: float = FloatProperty(name="Joint Dropout", description="Per-joint drop probability while training",
                                   default=0.2, min=0.0, max=0.9)
    jitter: float = FloatProperty(name="Jitter", description="Gaussian noise (mm) on present joints while training",
                                  default=10.0, min=0.0)
    poses: int = IntProperty(name="Training Poses", description="Synthetic poses drawn for training",
                             default=2000, min=1)


class RefineNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        n = len(SKELETON.joint_names)
        layers, width = [], 4 * n
        for _ in range(config.layers):
            layers += [nn.Linear(width, config.hidden), nn.ReLU()]
            width = config.hidden
        layers.append(nn.Linear(width, 3 * n))
        self.mlp = nn.Sequential(*layers)

    def forward(self, coords, mask):
        """coords (N, 15, 3) normalised with missing rows zeroed, mask (N, 15) -> residuals (N, 15, 3)."""
        x = torch.cat([coords.flatten(1), mask], dim=1)
        return self.mlp(x).view(coords.shape)


def normalise(joints, present):
    rel = joints - joints[0]
    torso = np.linalg.norm(rel[NECK]) if present[NECK] else TEMPLATE_TORSO
    torso = torso if torso > 1e-6 else TEMPLATE_TORSO
    return np.where(present[:, None], rel / torso, 0.0), torso


def clamp_bones(joints, imputed, low, high):
    for e, (p, c) in enumerate(SKELETON.edges):
        if not imputed[c]:
            continue
        bone = joints[c] - joints[p]
        length = np.linalg.norm(bone)
        target = np.clip(length, low * TEMPLATE_BONES[e], high * TEMPLATE_BONES[e])
        if length < 1e-9:
            bone, length = TEMPLATE_DIRECTIONS[e], 1.0
        joints[c] = joints[p] + bone * (target / length)
    return joints


def refine_pose(model, pose, config):
    """
    Returns (refined Pose3D, imputed mask). Poses with fewer than
    ``config.min_joints`` present joints, or without a pelvis, pass through.
    """
    joints = np.asarray(pose.joints, dtype=np.float64)
    present = pose.present
    if present.sum() < config.min_joints or not present[0]:
        return pose, np.zeros(len(present), dtype=bool)
    coords, torso = normalise(joints, present)
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        residual = model(torch.as_tensor(coords[None], dtype=dtype),
                         torch.as_tensor(present[None], dtype=dtype))[0].double().numpy()
    out = joints.copy()
    move = residual * torso
    norms = np.linalg.norm(move, axis=1)
    limit = np.where(norms > config.trust_radius, config.trust_radius / np.maximum(norms, 1e-12), 1.0)
    out[present] = joints[present] + (move * limit[:, None])[present]
    out[0] = joints[0]
    imputed = ~present
    out[imputed] = joints[0] + (coords[imputed] + residual[imputed]) * torso
    out = clamp_bones(out, imputed, config.bone_min, config.bone_max)
    return Pose3D(out, pose.person_id), imputed


def refine_person(model, person, config):
    """Refine an assembled person in place, marking imputed joints."""
    if person.pose3d is None:
        return person
    person.pose3d, imputed = refine_pose(model, person.pose3d, config)
    for j in np.flatnonzero(imputed):
        person.provenance[j] = REFINED
    return person


def synthetic_poses(count, seed, scene_config):
    """Root-relative ground-truth skeletons from the scene sampler's body and pose priors."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(count):
        body = pose_body(sample_shape(rng, scene_config), CapsulePose(sample_theta(rng, scene_config), np.zeros(3)))
        poses.append(body.joints.joints)
    return np.stack(poses)


def train_refine(poses, config, train, seed):
    """Fit the refiner on clean poses (N, 15, 3) with random dropout and jitter. Returns (model, LossCurve)."""
    seed_everything(seed, train.deterministic)
    rng = np.random.default_rng(seed)
    poses = np.asarray(poses, dtype=np.float64)
    model = RefineNet(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    curve = LossCurve()
    n = len(poses)
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, train.batch_size)):
            idx = order[start:start + train.batch_size]
            inputs, masks, targets = [], [], []
            for joints in poses[idx]:
                present = rng.random(len(joints)) >= config.dropout
                present[0] = True
                noisy = joints + rng.normal(0.0, config.jitter, size=joints.shape) * present[:, None]
                noisy[0] = joints[0]
                coords, torso = normalise(noisy, present)
                clean = (joints - joints[0]) / torso
                inputs.append(coords)
                masks.append(present)
                targets.append(clean - coords)
            x = torch.as_tensor(np.stack(inputs), dtype=torch.float32)
            m = torch.as_tensor(np.stack(masks), dtype=torch.float32)
            y = torch.as_tensor(np.stack(targets), dtype=torch.float32)
            loss = ((model(x, m) - y) ** 2).mean()
            guard_finite(loss, {"mse": loss}, epoch=epoch, batch=b)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            curve.add({"total": loss.detach()})
        curve.close_epoch(epoch)
        logger.info("refine epoch %d: loss %.5f", epoch, curve.values("total")[-1])
    model.eval()
    return model, curve


def save_refiner(path, model):
    write_checkpoint(path, "refiner", asdict(model.config), model.state_dict())


def load_refiner(path):
    state, meta = read_checkpoint(path, kind="refiner")
    model = RefineNet(RefineConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


# =============================================================================
# OPERATORS
# =============================================================================

class TrainRefine(Operator):
    """Train the pose refiner on synthetic skeletons"""
    idname = "train-refine"
    label = "Train Refiner"

    def execute(self, context):
        config = context.config
        count = int(context.input("count") or config.refine.poses)
        poses = synthetic_poses(count, config.seed, config.scene)
        model, curve = train_refine(poses, config.refine, config.train, config.seed)
        run_dir = Path(context.run_dir)
        save_refiner(run_dir / "refiner.ckpt", model)
        curve.write(run_dir / "loss_curve.csv")
        losses = curve.values("total")
        write_bridge_file({"poses": count, "initialLoss": losses[0], "finalLoss": losses[-1]}, run_dir / "metrics.json")
        self.report({'INFO'}, f"Refiner trained on {count} poses, loss {losses[0]:.5f} -> {losses[-1]:.5f}")
        return {'FINISHED'}
