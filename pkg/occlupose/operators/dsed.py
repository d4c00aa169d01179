# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Occluded-joint reasoning from heatmaps alone.

The distillation network holds two encoders with the same layer plan and one
decoder. The teacher encodes ground-truth maps (all joints by default), the
student encodes visible-joint maps, and every encoder level of the student is
pulled towards the teacher's. At inference only the student and the decoder
run. A plain hourglass with a matched parameter budget is kept as the
reasoning baseline and trains through the same loop.

Channel layout of reasoner input and output is keypoints then PAFs, channel
first inside the networks. PAF depth enters divided by 1000 and leaves
multiplied by 1000. In 2D mode PAF depth channels are dropped and pass
through from the detector at inference.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError
from ..props import BoolProperty, EnumProperty, IntProperty
from .base import Operator
from .detector import Hourglass, Residual, detector_forward, group_norm, load_detector, pad_to_multiple, paf_weights
from .files import read_checkpoint, require_input, write_bridge_file, write_checkpoint, write_csv_rows
from .targets import NUM_EDGES, NUM_JOINTS, NUM_TORSO, PAF_CHANNELS, HeatmapSet
from .training import LossCurve, SceneDataset, guard_finite, make_loader, seed_everything

logger = logging.getLogger(__name__)

PAF_DEPTH_UNIT = 1000.0
PAF_XY_CHANNELS = np.array([c for c in range(PAF_CHANNELS) if c % 3 != 2])

TEACHER_INPUT_ITEMS = (
    ('all_joints', "All Joints", "Teacher encodes the maps of every in-view joint"),
    ('occluded_only', "Occluded Only", "Teacher encodes the maps of occluded joints"),
)
CHANNEL_MODE_ITEMS = (
    ('3d', "3D", "Keypoints plus 3-channel PAFs with relative depth"),
    ('2d', "2D", "Keypoints plus 2-channel PAFs; depth passes through"),
)
REASONER_ITEMS = (
    ('dsed', "Distillation", "Teacher/student encoders with a shared decoder"),
    ('hourglass', "Hourglass", "Single hourglass of matched parameter count"),
)


@dataclass
class DsedConfig:
    levels: int = IntProperty(name="Levels", description="Encoder levels; level 0 keeps the heatmap resolution",
                              default=4, min=1, max=6)
    base_channels: int = IntProperty(name="Base Channels", description="Width of encoder level 0",
                                     default=16, min=4, max=256)
    max_channels: int = IntProperty(name="Max Channels", description="Width cap for deeper levels",
                                    default=128, min=4, max=1024)
    teacher_input_mode: str = EnumProperty(name="Teacher Input", description="What the teacher encoder sees",
                                           items=TEACHER_INPUT_ITEMS, default='all_joints')
    channel_mode: str = EnumProperty(name="Channel Mode", description="3D PAFs or 2D PAFs",
                                     items=CHANNEL_MODE_ITEMS, default='3d')
    reasoner: str = EnumProperty(name="Reasoner", description="Reasoning architecture to train",
                                 items=REASONER_ITEMS, default='dsed')
    use_occ_loss: bool = BoolProperty(name="Occluded Supervision",
                                      description="Add the occluded-joint term on detector-input batches",
                                      default=True)
    mode2_only: bool = BoolProperty(name="Synthetic Input Only",
                                    description="Train on synthetic visible maps only, never running the detector",
                                    default=False)
    hourglass_width: int = IntProperty(name="Hourglass Width",
                                       description="Baseline width; 0 matches the distillation parameter count",
                                       default=0, min=0, max=1024)

    def channel_plan(self):
        return [min(self.base_channels * 2 ** level, self.max_channels) for level in range(self.levels)]

    @property
    def paf_channels(self):
        return PAF_CHANNELS if self.channel_mode == '3d' else 2 * NUM_EDGES

    @property
    def map_channels(self):
        return NUM_JOINTS + self.paf_channels


@dataclass(eq=False)
class EncoderTrace:
    """Per-level encoder features, finest first."""
    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [tuple(level.shape) for level in self.levels]

    def detached(self):
        return EncoderTrace([level.detach() for level in self.levels])


# =============================================================================
# NETWORKS
# =============================================================================

def _output_scale(config):
    scale = torch.ones(config.map_channels)
    if config.channel_mode == '3d':
        scale[NUM_JOINTS + 2::3] = PAF_DEPTH_UNIT
    return scale


class Encoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        plan = config.channel_plan()
        stages = []
        c_in = config.map_channels
        for level, c in enumerate(plan):
            stride = 1 if level == 0 else 2
            stages.append(nn.Sequential(nn.Conv2d(c_in, c, 3, stride=stride, padding=1), group_norm(c), nn.ReLU(),
                                        Residual(c, c)))
            c_in = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return EncoderTrace(levels)


class Decoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        plan = config.channel_plan()
        self.ups = nn.ModuleList(nn.Conv2d(plan[level], plan[level - 1], 1) for level in range(len(plan) - 1, 0, -1))
        self.blocks = nn.ModuleList(Residual(plan[level - 1], plan[level - 1]) for level in range(len(plan) - 1, 0, -1))
        self.head = nn.Conv2d(plan[0], config.map_channels, 1)

    def forward(self, trace):
        x = trace.levels[-1]
        for i, level in enumerate(range(len(trace) - 1, 0, -1)):
            x = F.interpolate(self.ups[i](x), scale_factor=2, mode="nearest") + trace.levels[level - 1]
            x = self.blocks[i](x)
        return self.head(x)


class DSED(nn.Module):
    kind = "dsed"

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.teacher = Encoder(config)
        self.student = Encoder(config)
        self.decoder = Decoder(config)
        self.register_buffer("scale", _output_scale(config))

    def decode(self, trace):
        return self.decoder(trace) * self.scale[None, :, None, None]

    def reconstruct(self, x):
        return self.decode(self.student(x))

    def inference_parameters(self):
        return sum(p.numel() for module in (self.student, self.decoder) for p in module.parameters())


class HourglassReasoner(nn.Module):
    kind = "hourglass"

    def __init__(self, config, width):
        super().__init__()
        self.config = config
        self.width = width
        self.stem = nn.Sequential(nn.Conv2d(config.map_channels, width, 3, padding=1), group_norm(width), nn.ReLU())
        self.body = Hourglass(max(config.levels - 1, 1), width) if config.levels > 1 else Residual(width, width)
        self.head = nn.Sequential(Residual(width, width), nn.Conv2d(width, config.map_channels, 1))
        self.register_buffer("scale", _output_scale(config))

    def reconstruct(self, x):
        return self.head(self.body(self.stem(x))) * self.scale[None, :, None, None]

    def inference_parameters(self):
        return sum(p.numel() for p in self.parameters())


def matched_hourglass_width(config):
    """Hourglass width whose parameter count is closest to the distillation network's inference path."""
    target = DSED(config).inference_parameters()
    best, best_gap = 4, None
    for width in range(4, 1025, 4):
        count = HourglassReasoner(config, width).inference_parameters()
        gap = abs(count - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = width, gap
        if count > target:
            break
    return best


def build_reasoner(config):
    if config.reasoner == 'dsed':
        return DSED(config)
    width = config.hourglass_width or matched_hourglass_width(config)
    return HourglassReasoner(config, width)


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def _tensor(value, dtype):
    if isinstance(value, np.ndarray):
        value = torch.from_numpy(np.ascontiguousarray(value))
    return value.to(dtype)


def reasoner_input(maps, config, dtype=torch.float32):
    """HeatmapSet (channel last, batched or not) to an (N, C, h, w) reasoner input."""
    kp = _tensor(maps.keypoints, dtype)
    pafs = _tensor(maps.pafs, dtype)
    if kp.dim() == 3:
        kp, pafs = kp[None], pafs[None]
    if config.channel_mode == '3d':
        if pafs.shape[-1] != PAF_CHANNELS:
            raise ValidationError(f"3D reasoning needs {PAF_CHANNELS} PAF channels, got {pafs.shape[-1]}")
        scale = torch.ones(PAF_CHANNELS, dtype=dtype)
        scale[2::3] = 1.0 / PAF_DEPTH_UNIT
        pafs = pafs * scale
    elif pafs.shape[-1] == PAF_CHANNELS:
        pafs = pafs[..., torch.as_tensor(PAF_XY_CHANNELS)]
    elif pafs.shape[-1] != 2 * NUM_EDGES:
        raise ValidationError(f"2D reasoning needs {2 * NUM_EDGES} or {PAF_CHANNELS} PAF channels")
    x = torch.cat([kp, pafs], dim=-1).permute(0, 3, 1, 2)
    return pad_to_multiple(x, 2 ** max(config.levels - 1, 0)).contiguous()


def reasoner_output(out, grid):
    """(N, C, h, w) reconstruction cropped to ``grid``, as a channel-last HeatmapSet with empty root maps."""
    out = out[:, :, :grid[0], :grid[1]].permute(0, 2, 3, 1)
    root = out.new_zeros(out.shape[:-1] + (NUM_TORSO,))
    return HeatmapSet(out[..., :NUM_JOINTS], out[..., NUM_JOINTS:], root)


def match_channels(maps, config):
    """Targets restricted to the reasoner's PAF layout."""
    if config.channel_mode == '3d' or maps.pafs.shape[-1] != PAF_CHANNELS:
        return maps
    xy = torch.as_tensor(PAF_XY_CHANNELS) if torch.is_tensor(maps.pafs) else PAF_XY_CHANNELS
    return HeatmapSet(maps.keypoints, maps.pafs[..., xy], maps.root_depth, maps.paf_support, maps.root_support)


def _dtype(model):
    return next(model.parameters()).dtype


def teacher_forward(model, maps):
    """Teacher encoding and its reconstruction through the shared decoder."""
    trace = model.teacher(reasoner_input(maps, model.config, _dtype(model)))
    return trace, reasoner_output(model.decode(trace), maps.grid)


def student_forward(model, maps):
    trace = model.student(reasoner_input(maps, model.config, _dtype(model)))
    return trace, reasoner_output(model.decode(trace), maps.grid)


def map_terms(pred, target, depth_scale, keypoint_mask=None, paf_mask=None):
    """Summed squared keypoint and PAF residuals, optionally masked."""
    kp_target = _tensor(target.keypoints, pred.keypoints.dtype)
    paf_target = _tensor(target.pafs, pred.pafs.dtype)
    if pred.keypoints.shape != kp_target.shape or pred.pafs.shape != paf_target.shape:
        raise ValidationError(f"reconstruction {tuple(pred.pafs.shape)} and target {tuple(paf_target.shape)} differ")
    dk = (pred.keypoints - kp_target) ** 2
    dp = ((pred.pafs - paf_target) * paf_weights(paf_target.shape[-1], depth_scale, paf_target.dtype)) ** 2
    if keypoint_mask is not None:
        dk = dk * keypoint_mask
        dp = dp * paf_mask
    return dk.sum(), dp.sum()


def loss_reason(student_trace, teacher_trace, student_recon, targets_all, weights):
    """Reconstruction of all joints plus per-level feature matching against the (constant) teacher."""
    if len(student_trace) != len(teacher_trace):
        raise ValidationError(f"trace levels differ: {len(student_trace)} vs {len(teacher_trace)}")
    if student_trace.shapes != teacher_trace.shapes:
        raise ValidationError(f"trace shapes differ: {student_trace.shapes} vs {teacher_trace.shapes}")
    lk, lp = map_terms(student_recon, targets_all, weights.paf_depth_scale)
    l_all = weights.lam_k_all * lk + weights.lam_p_all * lp
    l_extract = sum(F.mse_loss(s, t.detach()) for s, t in zip(student_trace.levels, teacher_trace.levels))
    l_extract = l_extract / max(len(student_trace), 1)
    total = l_all + weights.omega_extract * l_extract
    return total, {"keypoints_all": lk, "pafs_all": lp, "extract": l_extract, "reason": total}


def occluded_support(targets, dtype):
    kp = _tensor(targets.keypoints, dtype)
    keypoint_mask = (kp > 0).to(dtype)
    width = targets.pafs.shape[-1] // NUM_EDGES
    if targets.paf_support is not None:
        support = _tensor(targets.paf_support, torch.bool)
        if support.shape[-1] == NUM_EDGES:
            support = support.repeat_interleave(width, dim=-1)
        paf_mask = support.to(dtype)
    else:
        paf_mask = (_tensor(targets.pafs, dtype) != 0).to(dtype)
    return keypoint_mask, paf_mask


def loss_occ(student_recon, targets_occluded, weights):
    """Squared residuals on occluded-joint support cells only."""
    keypoint_mask, paf_mask = occluded_support(targets_occluded, student_recon.keypoints.dtype)
    lk, lp = map_terms(student_recon, targets_occluded, weights.paf_depth_scale, keypoint_mask, paf_mask)
    return weights.lam_k_occ * lk + weights.lam_p_occ * lp


def reason_infer(model, detected):
    """
    Fuse detected maps with the student's reconstruction.
    Keypoints are added and clamped to [0, 1]; PAF edges keep the detected
    vector where it has support (xy norm >= 0.5) and take the reconstruction
    elsewhere; root maps pass through.
    """
    config = model.config
    kp = np.asarray(detected.keypoints, dtype=np.float64)
    pafs = np.asarray(detected.pafs, dtype=np.float64)
    with torch.no_grad():
        x = reasoner_input(detected, config, _dtype(model))
        recon = reasoner_output(model.reconstruct(x), detected.grid)
    r_kp = recon.keypoints[0].double().numpy()
    r_paf = recon.pafs[0].double().numpy()
    fused_kp = np.clip(np.clip(kp, 0.0, 1.0) + np.maximum(r_kp, 0.0), 0.0, 1.0)
    fused_paf = pafs.copy()
    for e in range(NUM_EDGES):
        keep = np.hypot(pafs[..., 3 * e], pafs[..., 3 * e + 1]) >= 0.5
        if config.channel_mode == '3d':
            src = r_paf[..., 3 * e:3 * e + 3]
            fused_paf[..., 3 * e:3 * e + 3][~keep] = src[~keep]
        else:
            src = r_paf[..., 2 * e:2 * e + 2]
            fused_paf[..., 3 * e:3 * e + 2][~keep] = src[~keep]
    return HeatmapSet(fused_kp, fused_paf, np.asarray(detected.root_depth, dtype=np.float64))


# =============================================================================
# TRAINING
# =============================================================================

def _mode_for(batch_number, config):
    if config.mode2_only:
        return 2
    return 1 if batch_number % 2 == 0 else 2


def train_reasoner(dataset, config, weights, train, seed, detector=None):
    """
    One loop for both reasoners. Even batches feed the detector's final-stack
    maps (mode 1, with the occluded term), odd batches feed synthetic visible
    maps (mode 2). Returns (model, LossCurve, schedule rows).
    """
    if len(dataset) == 0:
        raise ValidationError("training needs a non-empty dataset")
    if detector is None and not config.mode2_only:
        raise ValidationError("detector-input batches need a detector checkpoint", key="dsed.mode2_only")
    seed_everything(seed, train.deterministic)
    model = build_reasoner(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    loader = make_loader(dataset, train.batch_size, seed)
    curve = LossCurve()
    schedule = []
    teacher_split = "all" if config.teacher_input_mode == 'all_joints' else "occluded"
    batch_number = 0
    model.train()
    for epoch in range(train.epochs):
        for b, batch in enumerate(loader):
            mode = _mode_for(batch_number, config)
            schedule.append((epoch, b, mode))
            batch_number += 1
            if mode == 1:
                with torch.no_grad():
                    student_in = detector_forward(detector, batch["features"])[-1]
            else:
                student_in = batch["visible"]
            targets_all = match_channels(batch["all"], config)
            terms = {}
            if model.kind == "dsed":
                teacher_in = batch[teacher_split]
                teacher_trace, teacher_recon = teacher_forward(model, teacher_in)
                student_trace, student_recon = student_forward(model, student_in)
                tk, tp = map_terms(teacher_recon, match_channels(teacher_in, config), weights.paf_depth_scale)
                teacher_loss = weights.lam_k_all * tk + weights.lam_p_all * tp
                total, terms = loss_reason(student_trace, teacher_trace, student_recon, targets_all, weights)
                terms["teacher"] = teacher_loss
                total = total + teacher_loss
            else:
                student_recon = reasoner_output(model.reconstruct(reasoner_input(student_in, config)),
                                                student_in.grid)
                lk, lp = map_terms(student_recon, targets_all, weights.paf_depth_scale)
                total = weights.lam_k_all * lk + weights.lam_p_all * lp
                terms.update({"keypoints_all": lk, "pafs_all": lp})
            if mode == 1 and config.use_occ_loss:
                occ = loss_occ(student_recon, match_channels(batch["occluded"], config), weights)
                terms["occ"] = occ
                total = total + occ
            terms["total"] = total
            guard_finite(total, terms, epoch=epoch, batch=b, mode=mode)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            curve.add({k: v.detach() for k, v in terms.items()})
        curve.close_epoch(epoch)
        logger.info("%s epoch %d: loss %.4f", model.kind, epoch, curve.values("total")[-1])
    model.eval()
    return model, curve, schedule


def train_dsed(dataset, config, weights, train, seed, detector=None):
    """Train the distillation network whatever ``config.reasoner`` names. Returns (model, LossCurve, schedule)."""
    config = DsedConfig(**{**asdict(config), "reasoner": 'dsed'})
    return train_reasoner(dataset, config, weights, train, seed, detector)


def save_reasoner(path, model):
    config = asdict(model.config)
    if model.kind == "hourglass":
        config["hourglass_width"] = model.width
    write_checkpoint(path, "reasoner", config, model.state_dict(), extra={"reasoner": model.kind})


def load_reasoner(path):
    state, meta = read_checkpoint(path, kind="reasoner")
    model = build_reasoner(DsedConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def write_schedule(path, schedule):
    write_csv_rows(path, ("epoch", "batch", "mode"), schedule)


# =============================================================================
# OPERATORS
# =============================================================================

class TrainReasoner(Operator):
    """Train the occluded-joint reasoner (distillation network or hourglass baseline)"""
    idname = "train-dsed"
    label = "Train Reasoner"

    def execute(self, context):
        config = context.config
        dataset = SceneDataset(require_input(context.input("dataset"), "dataset directory"))
        detector = None
        if not config.dsed.mode2_only:
            detector = load_detector(require_input(context.input("detector"), "detector checkpoint"))
        trainer = train_dsed if config.dsed.reasoner == 'dsed' else train_reasoner
        model, curve, schedule = trainer(dataset, config.dsed, config.weights, config.train, config.seed, detector)
        run_dir = Path(context.run_dir)
        save_reasoner(run_dir / "reasoner.ckpt", model)
        curve.write(run_dir / "loss_curve.csv")
        write_schedule(run_dir / "mode_schedule.csv", schedule)
        losses = curve.values("total")
        write_bridge_file({"reasoner": model.kind, "parameters": model.inference_parameters(),
                           "initialLoss": losses[0], "finalLoss": losses[-1],
                           "detectorBatches": sum(1 for *_, mode in schedule if mode == 1)},
                          run_dir / "metrics.json")
        self.report({'INFO'}, f"{model.kind} reasoner trained, loss {losses[0]:.3f} -> {losses[-1]:.3f}")
        return {'FINISHED'}
