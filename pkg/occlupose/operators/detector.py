# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Stacked-hourglass detector of visible keypoints, 3D PAFs and root depths.

Every stack predicts a full map set, and later stacks see the earlier
prediction through additive skip fusion. PAF depth and root-depth channels
leave the network through fixed output scales so raw activations stay O(1)
while the maps stay in mm and normalised depth.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..bodytools import STRIDE
from ..errors import NumericError, ValidationError
from ..props import EnumProperty, FloatProperty, IntProperty
from .base import Operator
from .files import read_checkpoint, require_input, write_bridge_file, write_checkpoint
from .targets import NUM_JOINTS, NUM_TORSO, PAF_CHANNELS, HeatmapSet, TargetBundle
from .training import LossCurve, SceneDataset, guard_finite, make_loader, seed_everything

logger = logging.getLogger(__name__)

OUTPUT_CHANNELS = NUM_JOINTS + PAF_CHANNELS + NUM_TORSO
PAF_DEPTH_UNIT = 1000.0
ROOT_DEPTH_UNIT = 1000.0

SUPERVISION_ITEMS = (
    ('visible', "Visible Only", "Supervise visible joints and PAFs only"),
    ('all', "All Joints", "Supervise every in-view joint (ablation without occlusion labels)"),
)


@dataclass
class DetectorConfig:
    stacks: int = IntProperty(name="Stacks", description="Hourglass stacks, each deeply supervised",
                              default=2, min=1, max=8)
    base_channels: int = IntProperty(name="Base Channels", description="Feature width inside the hourglasses",
                                     default=64, min=8, max=512)
    hourglass_depth: int = IntProperty(name="Hourglass Depth", description="Down-sampling levels per hourglass",
                                       default=3, min=1, max=6)
    input_channels: int = IntProperty(name="Input Channels", description="Channels of the rendered input",
                                      default=4, min=1, max=64)
    supervision: str = EnumProperty(name="Supervision", description="Which joints the detector learns",
                                    items=SUPERVISION_ITEMS, default='visible')


@dataclass
class LossWeights:
    lam_k_vis: float = FloatProperty(name="Visible Keypoints", description="Weight of the visible keypoint term",
                                     default=1.0, min=0.0)
    lam_p_vis: float = FloatProperty(name="Visible PAFs", description="Weight of the visible PAF term",
                                     default=1.0, min=0.0)
    lam_r_vis: float = FloatProperty(name="Visible Root Depth", description="Weight of the root-depth L1 term",
                                     default=0.1, min=0.0)
    lam_k_all: float = FloatProperty(name="All Keypoints", description="Weight of the all-joint keypoint term",
                                     default=1.0, min=0.0)
    lam_p_all: float = FloatProperty(name="All PAFs", description="Weight of the all-joint PAF term",
                                     default=1.0, min=0.0)
    lam_k_occ: float = FloatProperty(name="Occluded Keypoints", description="Weight of the occluded keypoint term",
                                     default=1.0, min=0.0)
    lam_p_occ: float = FloatProperty(name="Occluded PAFs", description="Weight of the occluded PAF term",
                                     default=1.0, min=0.0)
    omega_extract: float = FloatProperty(name="Feature Distillation", description="Weight of the encoder matching term",
                                         default=1.0, min=0.0)
    paf_depth_scale: float = FloatProperty(name="PAF Depth Scale",
                                           description="Factor on PAF depth residuals inside the losses (mm to m)",
                                           default=1e-3, min=0.0)


# =============================================================================
# NETWORK
# =============================================================================

def group_norm(channels):
    return nn.GroupNorm(math.gcd(8, channels), channels)


class Residual(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        mid = max(c_out // 2, 1)
        self.body = nn.Sequential(
            group_norm(c_in), nn.ReLU(), nn.Conv2d(c_in, mid, 1),
            group_norm(mid), nn.ReLU(), nn.Conv2d(mid, mid, 3, padding=1),
            group_norm(mid), nn.ReLU(), nn.Conv2d(mid, c_out, 1),
        )
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.body(x) + self.skip(x)


class Hourglass(nn.Module):
    def __init__(self, depth, channels):
        super().__init__()
        self.up = Residual(channels, channels)
        self.down = Residual(channels, channels)
        self.inner = Hourglass(depth - 1, channels) if depth > 1 else Residual(channels, channels)
        self.out = Residual(channels, channels)

    def forward(self, x):
        low = self.out(self.inner(self.down(F.max_pool2d(x, 2))))
        return self.up(x) + F.interpolate(low, scale_factor=2, mode="nearest")


def output_scale(paf_depth=True):
    scale = torch.ones(OUTPUT_CHANNELS)
    if paf_depth:
        scale[NUM_JOINTS + 2:NUM_JOINTS + PAF_CHANNELS:3] = PAF_DEPTH_UNIT
    scale[NUM_JOINTS + PAF_CHANNELS:] = ROOT_DEPTH_UNIT
    return scale


class StackedHourglass(nn.Module):
    def __init__(self, config):
        super().__init__()
        c = config.base_channels
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, c // 2, 7, stride=2, padding=3), group_norm(c // 2), nn.ReLU(),
            Residual(c // 2, c), nn.MaxPool2d(2), Residual(c, c),
        )
        self.hourglasses = nn.ModuleList(Hourglass(config.hourglass_depth, c) for _ in range(config.stacks))
        self.features = nn.ModuleList(
            nn.Sequential(Residual(c, c), nn.Conv2d(c, c, 1), group_norm(c), nn.ReLU()) for _ in range(config.stacks))
        self.heads = nn.ModuleList(nn.Conv2d(c, OUTPUT_CHANNELS, 1) for _ in range(config.stacks))
        self.merge_features = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in range(config.stacks - 1))
        self.merge_preds = nn.ModuleList(nn.Conv2d(OUTPUT_CHANNELS, c, 1) for _ in range(config.stacks - 1))
        self.register_buffer("scale", output_scale())

    def forward(self, x):
        x = self.stem(x)
        outputs = []
        for s in range(self.config.stacks):
            feat = self.features[s](self.hourglasses[s](x))
            raw = self.heads[s](feat)
            outputs.append(raw * self.scale[None, :, None, None])
            if s < self.config.stacks - 1:
                x = x + self.merge_features[s](feat) + self.merge_preds[s](raw)
        return outputs


def split_output(out):
    """(N, 64, h, w) network output to a channel-last HeatmapSet."""
    out = out.permute(0, 2, 3, 1)
    return HeatmapSet(out[..., :NUM_JOINTS], out[..., NUM_JOINTS:NUM_JOINTS + PAF_CHANNELS],
                      out[..., NUM_JOINTS + PAF_CHANNELS:])


def build_detector(config):
    return StackedHourglass(config)


def pad_to_multiple(x, factor):
    """Zero-pad (N, C, H, W) at the bottom and right up to multiples of ``factor``."""
    pad_h = -x.shape[2] % factor
    pad_w = -x.shape[3] % factor
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    return x


def detector_forward(model, features):
    """
    Run the detector on (H, W, C) or (N, H, W, C) arrays, or (N, C, H, W) tensors.
    H and W must be multiples of the stride; the input is padded for the
    hourglass pooling and every output is cropped back to (H/4, W/4).
    Returns one HeatmapSet per stack.
    """
    config = model.config
    if isinstance(features, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
        if x.dim() == 3:
            x = x[None]
        x = x.permute(0, 3, 1, 2)
    else:
        x = features
    if x.dim() != 4 or x.shape[1] != config.input_channels:
        raise ValidationError(f"detector expects {config.input_channels} input channels, got shape {tuple(x.shape)}")
    if x.shape[2] % STRIDE or x.shape[3] % STRIDE:
        raise ValidationError(f"input size {tuple(x.shape[2:])} must be divisible by {STRIDE}")
    h, w = x.shape[2] // STRIDE, x.shape[3] // STRIDE
    x = pad_to_multiple(x.to(next(model.parameters()).dtype), STRIDE * 2 ** config.hourglass_depth)
    return [split_output(out[:, :, :h, :w]) for out in model(x)]


# =============================================================================
# LOSS
# =============================================================================

def paf_weights(channels, depth_scale, dtype):
    w = torch.ones(channels, dtype=dtype)
    if channels == PAF_CHANNELS:
        w[2::3] = depth_scale
    return w


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in loss inputs")


def root_term(pred_root, samples):
    """Sum of |H_r(row, col, channel) - Zhat| over the listed samples of every batch item."""
    total = pred_root.sum() * 0.0
    for n, rows in enumerate(samples):
        rows = np.asarray(rows).reshape(-1, 4)
        if not len(rows):
            continue
        ch = torch.as_tensor(rows[:, 0], dtype=torch.long)
        r = torch.as_tensor(rows[:, 1], dtype=torch.long)
        c = torch.as_tensor(rows[:, 2], dtype=torch.long)
        values = torch.as_tensor(rows[:, 3], dtype=pred_root.dtype)
        total = total + (pred_root[n, r, c, ch] - values).abs().sum()
    return total


def loss_vis(preds, targets, root_gt, weights):
    """Deeply supervised visible-joint loss summed over stacks. Returns (total, breakdown)."""
    if isinstance(targets, TargetBundle):
        targets = targets.visible
    _check_finite(targets.keypoints, targets.pafs, *[p.keypoints for p in preds], *[p.pafs for p in preds],
                  *[p.root_depth for p in preds])
    for p in preds:
        if p.keypoints.shape != targets.keypoints.shape or p.pafs.shape != targets.pafs.shape:
            raise ValidationError("prediction and target shapes differ")
    pw = paf_weights(targets.pafs.shape[-1], weights.paf_depth_scale, targets.pafs.dtype)
    lk = sum(((p.keypoints - targets.keypoints) ** 2).sum() for p in preds)
    lp = sum((((p.pafs - targets.pafs) * pw) ** 2).sum() for p in preds)
    lr = sum(root_term(p.root_depth, root_gt) for p in preds)
    total = weights.lam_k_vis * lk + weights.lam_p_vis * lp + weights.lam_r_vis * lr
    return total, {"keypoints": lk, "pafs": lp, "root": lr, "total": total}


# =============================================================================
# TRAINING
# =============================================================================

def train_detector(dataset, config, weights, train, seed):
    """Returns (model, LossCurve). ``config.supervision`` picks visible-only or all-joint targets."""
    if len(dataset) == 0:
        raise ValidationError("training needs a non-empty dataset")
    seed_everything(seed, train.deterministic)
    model = build_detector(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    loader = make_loader(dataset, train.batch_size, seed)
    split = config.supervision
    curve = LossCurve()
    model.train()
    for epoch in range(train.epochs):
        for b, batch in enumerate(loader):
            preds = detector_forward(model, batch["features"])
            total, terms = loss_vis(preds, batch[split], batch[f"root_{split}"], weights)
            guard_finite(total, terms, epoch=epoch, batch=b)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            curve.add({k: v.detach() for k, v in terms.items()})
        curve.close_epoch(epoch)
        logger.info("detector epoch %d: loss %.4f", epoch, curve.values("total")[-1])
    model.eval()
    return model, curve


def save_detector(path, model):
    write_checkpoint(path, "detector", asdict(model.config), model.state_dict())


def load_detector(path):
    state, meta = read_checkpoint(path, kind="detector")
    model = build_detector(DetectorConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def predict_maps(model, features):
    """Final-stack maps of one (H, W, C) rendering as numpy arrays."""
    with torch.no_grad():
        out = detector_forward(model, features)[-1]
    return HeatmapSet(out.keypoints[0].numpy().astype(np.float64), out.pafs[0].numpy().astype(np.float64),
                      out.root_depth[0].numpy().astype(np.float64))


# =============================================================================
# OPERATORS
# =============================================================================

class TrainDetector(Operator):
    """Train the stacked-hourglass detector on a labelled dataset"""
    idname = "train-det"
    label = "Train Detector"

    def execute(self, context):
        config = context.config
        dataset_dir = require_input(context.input("dataset"), "dataset directory")
        dataset = SceneDataset(dataset_dir, splits=(config.detector.supervision,))
        model, curve = train_detector(dataset, config.detector, config.weights, config.train, config.seed)
        run_dir = Path(context.run_dir)
        save_detector(run_dir / "detector.ckpt", model)
        curve.write(run_dir / "loss_curve.csv")
        losses = curve.values("total")
        write_bridge_file({"initialLoss": losses[0], "finalLoss": losses[-1], "epochs": len(losses)},
                          run_dir / "metrics.json")
        self.report({'INFO'}, f"Detector trained for {len(losses)} epochs, loss {losses[0]:.3f} -> {losses[-1]:.3f}")
        return {'FINISHED'}
