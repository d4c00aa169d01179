# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Reasoning ablation at desk scale.

Builds a training and an evaluation dataset, trains the detector with and
without occlusion labels, both reasoners and the refiner, then scores every
row on the same evaluation scenes. Rows and columns follow the reasoning
ablation: 3D PCK (rel, occ), occluded-joint detection rate on the
fused maps and visible-joint localisation error on the detector's maps.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..props import EnumProperty, IntProperty
from .base import Operator
from .detector import save_detector, train_detector
from .dsed import save_reasoner, train_dsed, train_reasoner
from .evalkit import EvalFrame, evaluate, peak_distances
from .files import (get_sidecar_path, list_records, read_bridge_file, recursively_create_directories,
                    write_bridge_file, write_csv_rows)
from .occlusion import OCCLUDED, VISIBLE, label_record, load_masks
from .pipeline import PipelineModels, run_pipeline
from .refine import save_refiner, synthetic_poses, train_refine
from .scenes import generate_dataset, read_scene
from .training import SceneDataset

logger = logging.getLogger(__name__)

SUITE_ITEMS = (
    ('reasoning', "Reasoning Ablation", "Detector / reasoner / occlusion-label ablation rows"),
    ('table3', "Reasoning Ablation", "Same rows as 'reasoning'"),
)
REASONING_SUITES = ('reasoning', 'table3')

COLUMNS = ("method", "pck_rel", "pck_occ", "occ_recall", "vis_loc_error", "mpjpe_rel")


@dataclass
class AblationConfig:
    suite: str = EnumProperty(name="Suite", description="Ablation to run", items=SUITE_ITEMS, default='reasoning')
    train_count: int = IntProperty(name="Training Scenes", description="Scenes in the training split",
                                   default=64, min=1)
    eval_count: int = IntProperty(name="Evaluation Scenes", description="Scenes in the evaluation split",
                                  default=32, min=1)
    eval_seed_offset: int = IntProperty(name="Evaluation Seed Offset",
                                        description="Added to the run seed for the evaluation split",
                                        default=100000, min=1)


@dataclass
class AblationRow:
    method: str
    pck_rel: float = None
    pck_occ: float = None
    occ_recall: float = None
    vis_loc_error: float = None
    mpjpe_rel: float = None

    def cells(self):
        return [self.method] + ["-" if v is None else f"{v:.2f}" for v in
                                (self.pck_rel, self.pck_occ, self.occ_recall, self.vis_loc_error, self.mpjpe_rel)]


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def prepare_split(directory, seed, count, config):
    generate_dataset(directory, seed, count, config.scene)
    for index in list_records(directory):
        label_record(directory, index, config, "exact")
    return directory


def score_method(name, eval_dir, config, models):
    frames, occ, vis = [], [], []
    for index in list_records(eval_dir):
        scene = read_scene(eval_dir, index)
        labels = np.asarray(read_labels(eval_dir, index))
        _, features = load_masks(eval_dir, index)
        result = run_pipeline(scene.camera, config, models, features=features)
        poses = scene.poses
        frames.append(EvalFrame([p.pose3d for p in result.people if p.pose3d is not None], poses, labels, index))
        occ.append(peak_distances(result.fused.keypoints, poses, labels, scene.camera, OCCLUDED, config.assembly.tau))
        vis.append(peak_distances(result.detected.keypoints, poses, labels, scene.camera, VISIBLE,
                                  config.assembly.tau))
    report = evaluate(frames, config.eval)
    occ = np.concatenate(occ) if occ else np.zeros(0)
    vis = np.concatenate(vis) if vis else np.zeros(0)
    vis = vis[np.isfinite(vis)]
    return AblationRow(
        method=name,
        pck_rel=report.pck_rel,
        pck_occ=report.pck_occ,
        occ_recall=float(100.0 * np.mean(occ <= config.eval.peak_radius)) if len(occ) else None,
        vis_loc_error=float(vis.mean()) if len(vis) else None,
        mpjpe_rel=report.mpjpe_rel,
    )


def read_labels(dataset_dir, index):
    return read_bridge_file(get_sidecar_path(dataset_dir, index))["occlusionLabels"]


def format_table(rows):
    table = [list(COLUMNS)] + [row.cells() for row in rows]
    widths = [max(len(r[c]) for r in table) for c in range(len(COLUMNS))]
    lines = []
    for i, r in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[c]) if c == 0 else cell.rjust(widths[c]) for c, cell in enumerate(r)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_reasoning_ablation(run_dir, config):
    """Train every component once and score all ablation rows. Returns the rows."""
    run_dir = recursively_create_directories(run_dir)
    models_dir = recursively_create_directories(run_dir / "models")
    ablation = config.ablation
    train_dir = prepare_split(run_dir / "train", config.seed, ablation.train_count, config)
    eval_dir = prepare_split(run_dir / "eval", config.seed + ablation.eval_seed_offset, ablation.eval_count, config)

    train_set = SceneDataset(train_dir)
    det, _ = train_detector(train_set, replace(config.detector, supervision='visible'), config.weights,
                            config.train, config.seed)
    det_all, _ = train_detector(train_set, replace(config.detector, supervision='all'), config.weights,
                                config.train, config.seed)
    dsed_config = replace(config.dsed, reasoner='dsed', mode2_only=False)
    dsed, _, _ = train_dsed(train_set, dsed_config, config.weights, config.train, config.seed, det)
    hourglass, _, _ = train_reasoner(train_set, replace(dsed_config, reasoner='hourglass'), config.weights,
                                     config.train, config.seed, det)
    dsed_all, _, _ = train_dsed(train_set, dsed_config, config.weights, config.train, config.seed, det_all)
    refiner, _ = train_refine(synthetic_poses(config.refine.poses, config.seed, config.scene), config.refine,
                              config.train, config.seed)
    save_detector(models_dir / "detector.ckpt", det)
    save_detector(models_dir / "detector_all.ckpt", det_all)
    save_reasoner(models_dir / "dsed.ckpt", dsed)
    save_reasoner(models_dir / "hourglass.ckpt", hourglass)
    save_reasoner(models_dir / "dsed_all.ckpt", dsed_all)
    save_refiner(models_dir / "refiner.ckpt", refiner)

    plan = [
        ("Det", PipelineModels(det)),
        ("Det + Reason (Hg)", PipelineModels(det, hourglass)),
        ("Det + Reason (DSED)", PipelineModels(det, dsed)),
        ("Det + Reason (DSED) + Ref", PipelineModels(det, dsed, refiner)),
        ("Det (w/o OccL)", PipelineModels(det_all)),
        ("Det (w/o OccL) + Reason (DSED)", PipelineModels(det_all, dsed_all)),
    ]
    rows = []
    for name, models in plan:
        rows.append(score_method(name, eval_dir, config, models))
        logger.info("%s: %s", name, rows[-1].cells()[1:])
    return rows


def write_ablation(run_dir, rows, suite="reasoning"):
    run_dir = Path(run_dir)
    write_csv_rows(run_dir / "ablation.csv", COLUMNS,
                   [[r.method] + ["" if v is None else repr(v) for v in
                                  (r.pck_rel, r.pck_occ, r.occ_recall, r.vis_loc_error, r.mpjpe_rel)] for r in rows])
    with open(run_dir / "ablation.txt", "w", newline="\n") as file:
        file.write(format_table(rows))
    write_bridge_file({"suite": suite, "rows": [dict(zip(COLUMNS, [r.method, r.pck_rel, r.pck_occ, r.occ_recall,
                                                                       r.vis_loc_error, r.mpjpe_rel]))
                                                   for r in rows]}, run_dir / "metrics.json")


# =============================================================================
# OPERATORS
# =============================================================================

class Ablate(Operator):
    """Train and score the reasoning ablation rows"""
    idname = "ablate"
    label = "Ablation"

    @classmethod
    def poll(cls, context):
        return context.config.ablation.suite in REASONING_SUITES

    def execute(self, context):
        rows = run_reasoning_ablation(Path(context.run_dir), context.config)
        write_ablation(context.run_dir, rows, context.config.ablation.suite)
        self.report({'INFO'}, "\n" + format_table(rows))
        return {'FINISHED'}
