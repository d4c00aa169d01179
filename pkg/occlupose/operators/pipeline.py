# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Per-frame inference: detection, reasoning, grouping, root depth, lifting and refinement.

Passing ``maps`` skips both networks and groups the given maps directly,
which is how perfect ground-truth maps are checked against the geometry.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ..errors import ValidationError
from .assembly import assemble, extract_peaks, infer_root_depth, lift_to_3d, tag_provenance
from .base import Operator
from .detector import load_detector, predict_maps
from .dsed import load_reasoner, reason_infer
from .files import (FORMAT_VERSION, get_sidecar_path, list_records, recursively_create_directories, require_input,
                    write_bridge_file)
from .occlusion import load_masks
from .refine import load_refiner, refine_person
from .scenes import read_scene
from .targets import HeatmapSet, load_targets

logger = logging.getLogger(__name__)


@dataclass
class PipelineModels:
    detector: object = None
    reasoner: object = None
    refiner: object = None


@dataclass(eq=False)
class FrameResult:
    people: list
    detected: HeatmapSet
    fused: HeatmapSet
    diagnostics: dict


def _as_float(maps):
    return HeatmapSet(np.asarray(maps.keypoints, dtype=np.float64), np.asarray(maps.pafs, dtype=np.float64),
                      np.asarray(maps.root_depth, dtype=np.float64))


def run_pipeline(camera, config, models=None, features=None, maps=None):
    """Returns a FrameResult whose people carry 2D joints, root depth, provenance and lifted poses."""
    models = models or PipelineModels()
    if maps is not None:
        detected = fused = _as_float(maps)
    else:
        if features is None or models.detector is None:
            raise ValidationError("inference needs either maps or features with a detector")
        detected = predict_maps(models.detector, features)
        fused = reason_infer(models.reasoner, detected) if models.reasoner is not None else detected
    diagnostics = {}
    cfg = config.assembly
    candidates = extract_peaks(fused, cfg.tau)
    people = assemble(candidates, fused.pafs, cfg, fused.root_depth, camera, diagnostics)
    tag_provenance(people, detected.keypoints, cfg.tau)
    sources = []
    for person in people:
        person.root_depth, person.root_source = infer_root_depth(person, fused.root_depth, camera,
                                                                 conf_thresh=cfg.conf_thresh,
                                                                 shoulder_depth_prior=cfg.shoulder_depth_prior)
        sources.append(person.root_source)
        if person.root_depth is not None:
            person.pose3d = lift_to_3d(person, camera)
            if models.refiner is not None:
                refine_person(models.refiner, person, config.refine)
    diagnostics["rootDepthSources"] = sources
    return FrameResult(people, detected, fused, diagnostics)


def perfect_maps(dataset_dir, index, split="all"):
    bundle, _ = load_targets(dataset_dir, index)
    return getattr(bundle, split)


def frame_to_dict(index, result):
    return {
        "formatVersion": FORMAT_VERSION,
        "index": index,
        "people": [person.to_dict() for person in result.people],
        "diagnostics": result.diagnostics,
    }


def load_models(context, networks=True):
    """Checkpoints named by the command inputs; the refiner alone when ``networks`` is off."""
    detector = context.input("detector") if networks else None
    reasoner = context.input("reasoner") if networks else None
    refiner = context.input("refiner")
    return PipelineModels(
        detector=load_detector(require_input(detector, "detector checkpoint")) if detector else None,
        reasoner=load_reasoner(require_input(reasoner, "reasoner checkpoint")) if reasoner else None,
        refiner=load_refiner(require_input(refiner, "refiner checkpoint")) if refiner else None,
    )


def infer_dataset(dataset_dir, out_dir, config, models, use_perfect_maps=False):
    """Write one prediction file per record; returns the number of people found."""
    out_dir = recursively_create_directories(out_dir)
    found = 0
    for index in tqdm(list_records(dataset_dir), desc="infer", disable=None):
        camera = read_scene(dataset_dir, index).camera
        if use_perfect_maps:
            result = run_pipeline(camera, config, models, maps=perfect_maps(dataset_dir, index))
        else:
            _, features = load_masks(dataset_dir, index)
            result = run_pipeline(camera, config, models, features=features)
        found += len(result.people)
        write_bridge_file(frame_to_dict(index, result), Path(out_dir) / get_sidecar_path(dataset_dir, index).name)
    return found


# =============================================================================
# OPERATORS
# =============================================================================

class Infer(Operator):
    """Run the full pipeline over a dataset and write per-frame predictions"""
    idname = "infer"
    label = "Infer"

    def execute(self, context):
        dataset_dir = require_input(context.input("dataset"), "dataset directory")
        use_perfect = bool(context.input("perfect_maps"))
        if not use_perfect:
            require_input(context.input("detector"), "detector checkpoint")
        models = load_models(context, networks=not use_perfect)
        out_dir = Path(context.run_dir) / "predictions"
        found = infer_dataset(dataset_dir, out_dir, context.config, models, use_perfect)
        write_bridge_file({"records": len(list_records(dataset_dir)), "people": found,
                           "perfectMaps": use_perfect}, Path(context.run_dir) / "metrics.json")
        self.report({'INFO'}, f"Wrote predictions for {found} people to {out_dir}")
        return {'FINISHED'}
