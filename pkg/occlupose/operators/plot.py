# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""Figures: loss curves, heatmap overlays and skeleton renderings as PNG files."""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..bodytools import EDGES, STRIDE, project_points  # noqa: E402
from ..errors import ValidationError  # noqa: E402
from .base import Operator  # noqa: E402
from .evalkit import read_prediction_frame  # noqa: E402
from .files import get_sidecar_path, read_csv_rows, recursively_create_directories, require_input  # noqa: E402
from .occlusion import load_masks  # noqa: E402
from .scenes import read_scene  # noqa: E402
from .targets import load_targets  # noqa: E402

logger = logging.getLogger(__name__)

_PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return Path(path)


def plot_loss_curve(csv_path, out_path):
    rows = read_csv_rows(csv_path)
    if not rows:
        raise ValidationError(f"{csv_path} holds no loss rows")
    terms = {}
    for row in rows:
        terms.setdefault(row["term"], []).append((int(row["epoch"]), float(row["value"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in sorted(terms):
        epochs, values = zip(*terms[term])
        ax.plot(epochs, values, marker="o", label=term)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend(fontsize="small")
    return _save(fig, out_path)


def plot_heatmap_overlay(features, keypoints, out_path, title=""):
    """Person mask of the rendering with the max over keypoint channels upsampled on top."""
    features = np.asarray(features)
    heat = np.asarray(keypoints).max(axis=-1)
    heat = np.kron(heat, np.ones((STRIDE, STRIDE)))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(features[..., 1], cmap="gray", vmin=0.0, vmax=1.0)
    ax.imshow(heat, cmap="magma", alpha=0.6, vmin=0.0, vmax=1.0)
    ax.set_title(title)
    ax.axis("off")
    return _save(fig, out_path)


def plot_skeletons(camera, out_path, gts=(), preds=(), background=None):
    fig, ax = plt.subplots(figsize=(5, 5))
    if background is not None:
        ax.imshow(background, cmap="gray")
    for poses, color in ((gts, "tab:green"), (preds, "tab:red")):
        for pose in poses:
            uv = project_points(camera, np.asarray(getattr(pose, "joints", pose)))
            for p, c in EDGES:
                if np.isfinite(uv[[p, c]]).all():
                    ax.plot(uv[[p, c], 0], uv[[p, c], 1], color=color, linewidth=2)
    ax.set_xlim(0, camera.width)
    ax.set_ylim(camera.height, 0)
    ax.set_aspect("equal")
    return _save(fig, out_path)


# =============================================================================
# OPERATORS
# =============================================================================

class Plot(Operator):
    """Render loss curves, heatmap overlays and skeletons"""
    idname = "plot"
    label = "Plot"

    @classmethod
    def poll(cls, context):
        return bool(context.input("inputs")) or bool(context.input("dataset"))

    def execute(self, context):
        out_dir = recursively_create_directories(Path(context.run_dir) / "figures")
        written = []
        for path in context.input("inputs") or ():
            path = Path(require_input(path, "plot input"))
            if path.suffix == ".csv":
                written.append(plot_loss_curve(path, out_dir / f"{path.stem}.png"))
            else:
                self.report({'WARNING'}, f"Skipping {path}: only CSV loss curves are plotted directly")
        dataset = context.input("dataset")
        if dataset:
            dataset = require_input(dataset, "dataset directory")
            index = int(context.input("index") or 0)
            scene = read_scene(dataset, index)
            _, features = load_masks(dataset, index)
            bundle, _ = load_targets(dataset, index)
            written.append(plot_heatmap_overlay(features, bundle.all.keypoints, out_dir / f"heatmaps_{index:05d}.png",
                                                "all joints"))
            preds = []
            predictions = context.input("predictions")
            if predictions:
                _, people = read_prediction_frame(require_input(Path(predictions) / get_sidecar_path(dataset, index).name,
                                                                "prediction file"))
                preds = [p.pose3d for p in people if p.pose3d is not None]
            written.append(plot_skeletons(scene.camera, out_dir / f"skeletons_{index:05d}.png", scene.poses, preds,
                                          features[..., 1]))
        if not written:
            self.report({'ERROR'}, "Nothing to plot")
            return {'CANCELLED'}
        self.report({'INFO'}, f"Wrote {len(written)} figures to {out_dir}")
        return {'FINISHED'}
