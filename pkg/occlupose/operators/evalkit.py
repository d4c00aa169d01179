# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Person matching, PCK / MPJPE in abs, rel and occ modes, and map-level peak metrics.

A missing predicted joint is an incorrect joint for PCK and is left out of
MPJPE. In 'all' people mode every joint of an unmatched ground-truth person
counts as incorrect; false positives are reported separately.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ..bodytools import SKELETON, Pose3D
from ..errors import ValidationError
from ..props import EnumProperty, FloatProperty
from .assembly import PersonEstimate, extract_peaks
from .base import Operator
from .files import (get_sidecar_path, list_records, read_bridge_file, recursively_create_directories, require_input,
                    write_bridge_file)
from .occlusion import OCCLUDED, TRUNCATED, VISIBLE
from .targets import heatmap_coords

logger = logging.getLogger(__name__)

MODES = ("abs", "rel", "occ")

PEOPLE_MODE_ITEMS = (
    ('matched', "Matched People", "Only matched ground-truth people are scored"),
    ('all', "All People", "Unmatched ground-truth people score every joint as incorrect"),
)


@dataclass
class EvalConfig:
    pck_threshold: float = FloatProperty(name="PCK Threshold", description="Correct-joint distance bound (mm)",
                                         default=150.0, min=0.0)
    match_gate: float = FloatProperty(name="Match Gate", description="Largest root distance (mm) of a matched pair",
                                      default=500.0, min=0.0)
    peak_radius: float = FloatProperty(name="Peak Radius", description="Peak-to-joint distance (cells) of a hit",
                                       default=2.0, min=0.0)
    people_mode: str = EnumProperty(name="People", description="Which ground-truth people PCK scores",
                                    items=PEOPLE_MODE_ITEMS, default='matched')


@dataclass(eq=False)
class Matching:
    preds: list
    gts: list
    pairs: list = field(default_factory=list)
    unmatched_preds: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


@dataclass
class EvalReport:
    pck_abs: float = None
    pck_rel: float = None
    pck_occ: float = None
    mpjpe_rel: float = None
    mpjpe_occ: float = None
    matched_count: int = 0
    total_gt: int = 0
    total_pred: int = 0
    false_positives: int = 0
    people_mode: str = "matched"
    per_joint: dict = field(default_factory=dict)
    label_counts: dict = field(default_factory=dict)

    _KEYS = {
        "pck_abs": "pckAbs", "pck_rel": "pckRel", "pck_occ": "pckOcc", "mpjpe_rel": "mpjpeRel",
        "mpjpe_occ": "mpjpeOcc", "matched_count": "matchedCount", "total_gt": "totalGt", "total_pred": "totalPred",
        "false_positives": "falsePositives", "people_mode": "peopleMode", "per_joint": "perJointPckRel",
        "label_counts": "labelCounts",
    }

    def to_dict(self):
        return {self._KEYS[k]: v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        reverse = {v: k for k, v in cls._KEYS.items()}
        return cls(**{reverse[k]: v for k, v in data.items() if k in reverse})


@dataclass(eq=False)
class EvalFrame:
    preds: list
    gts: list
    labels: np.ndarray = None
    index: int = 0


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def _joints(pose):
    return np.asarray(getattr(pose, "joints", pose), dtype=np.float64)


def match_people(preds, gts, gate=500.0):
    """Greedy one-to-one matching by ascending pelvis distance; ties by prediction then ground-truth index."""
    candidates = []
    for i, pred in enumerate(preds):
        for k, gt in enumerate(gts):
            d = float(np.linalg.norm(_joints(pred)[0] - _joints(gt)[0]))
            if np.isfinite(d) and d <= gate:
                candidates.append((d, i, k))
    candidates.sort()
    used_p, used_g = set(), set()
    pairs = []
    for d, i, k in candidates:
        if i in used_p or k in used_g:
            continue
        used_p.add(i)
        used_g.add(k)
        pairs.append((i, k, d))
    return Matching(list(preds), list(gts), pairs,
                    [i for i in range(len(preds)) if i not in used_p],
                    [k for k in range(len(gts)) if k not in used_g])


def _aligned(pred, gt, mode):
    p, g = _joints(pred), _joints(gt)
    if mode == "abs":
        return p, g
    return p - p[0], g - g[0]


def joint_errors(matching, mode, labels=None, people_mode="matched", joint_mask=None):
    """
    Per evaluated ground-truth joint error in mm (inf when the prediction is
    missing or the person is unmatched), plus the joint index of each entry.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode '{mode}'")
    if mode == "occ" and labels is None:
        raise ValidationError("occ mode needs occlusion labels")
    if labels is not None:
        labels = np.asarray(getattr(labels, "labels", labels))
    n = len(SKELETON.joint_names)
    mask = np.ones(n, dtype=bool) if joint_mask is None else np.asarray(joint_mask, dtype=bool)

    def selected(k):
        out = mask.copy()
        if mode == "occ":
            out &= labels[k] == OCCLUDED
        return out

    errors, joints = [], []
    for i, k, _ in matching.pairs:
        p, g = _aligned(matching.preds[i], matching.gts[k], mode)
        d = np.linalg.norm(p - g, axis=1)
        d[~np.isfinite(d)] = np.inf
        sel = selected(k)
        errors.append(d[sel])
        joints.append(np.flatnonzero(sel))
    if people_mode == "all":
        for k in matching.unmatched_gts:
            sel = selected(k)
            errors.append(np.full(sel.sum(), np.inf))
            joints.append(np.flatnonzero(sel))
    if not errors:
        return np.zeros(0), np.zeros(0, dtype=int)
    return np.concatenate(errors), np.concatenate(joints)


def _pck(errors, thresh):
    if not len(errors):
        return None
    return float(100.0 * np.count_nonzero(errors < thresh) / len(errors))


def _mpjpe(errors):
    errors = errors[np.isfinite(errors)]
    return float(errors.mean()) if len(errors) else None


def pck(matching, mode, labels=None, thresh=150.0, people_mode="matched"):
    """Percentage of evaluated joints with error strictly below ``thresh``; None when nothing is evaluated."""
    errors, _ = joint_errors(matching, mode, labels, people_mode)
    return _pck(errors, thresh)


def mpjpe(matching, mode, labels=None, joint_mask=None):
    """Mean joint error in mm over matched, present joints; None when there is none."""
    errors, _ = joint_errors(matching, mode, labels, "matched", joint_mask)
    return _mpjpe(errors)


def joint_label_counts(matchings, labels_list):
    """Truncated / occluded / visible counts over the matched ground-truth people of each frame."""
    counts = {"truncated": 0, "occluded": 0, "visible": 0, "total": 0}
    for matching, labels in zip(matchings, labels_list):
        labels = np.asarray(getattr(labels, "labels", labels))
        for _, k, _ in matching.pairs:
            counts["truncated"] += int(np.sum(labels[k] == TRUNCATED))
            counts["occluded"] += int(np.sum(labels[k] == OCCLUDED))
            counts["visible"] += int(np.sum(labels[k] == VISIBLE))
            counts["total"] += len(labels[k])
    return counts


def peak_distances(keypoint_maps, poses, labels, camera, label_value, tau):
    """Distance (cells) from each in-view joint of a label class to the nearest peak of its channel, inf if none."""
    labels = np.asarray(getattr(labels, "labels", labels))
    peaks = extract_peaks(keypoint_maps, tau)
    by_type = {}
    for k in peaks:
        by_type.setdefault(k.type, []).append(k.position)
    distances = []
    for pose, row in zip(poses, labels):
        coords, in_view = heatmap_coords(camera, _joints(pose))
        for j in np.flatnonzero((row == label_value) & in_view):
            found = by_type.get(j)
            if not found:
                distances.append(np.inf)
                continue
            distances.append(float(np.min(np.linalg.norm(np.asarray(found) - coords[j], axis=1))))
    return np.asarray(distances, dtype=np.float64)


def peak_recall(keypoint_maps, poses, labels, camera, label_value=OCCLUDED, radius=2.0, tau=0.3):
    """Fraction of joints of one label class with an extracted peak of their channel within ``radius`` cells."""
    distances = peak_distances(keypoint_maps, poses, labels, camera, label_value, tau)
    if not len(distances):
        return None
    return float(np.count_nonzero(distances <= radius) / len(distances))


def peak_localization_error(keypoint_maps, poses, labels, camera, label_value=VISIBLE, tau=0.3):
    """Mean distance (cells) from each joint of a label class to the nearest peak of its channel."""
    distances = peak_distances(keypoint_maps, poses, labels, camera, label_value, tau)
    distances = distances[np.isfinite(distances)]
    return float(distances.mean()) if len(distances) else None


def evaluate(frames, config):
    """Pool joint errors over frames into one EvalReport."""
    matchings = [match_people(f.preds, f.gts, config.match_gate) for f in tqdm(frames, desc="eval", disable=None)]
    have_labels = all(f.labels is not None for f in frames)

    def pooled(mode, people_mode):
        parts = [joint_errors(m, mode, f.labels, people_mode) for m, f in zip(matchings, frames)]
        if not parts:
            return np.zeros(0), np.zeros(0, dtype=int)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    t = config.pck_threshold
    report = EvalReport(people_mode=config.people_mode)
    report.pck_abs = _pck(pooled("abs", config.people_mode)[0], t)
    rel_errors, rel_joints = pooled("rel", config.people_mode)
    report.pck_rel = _pck(rel_errors, t)
    report.mpjpe_rel = _mpjpe(pooled("rel", "matched")[0])
    if have_labels:
        report.pck_occ = _pck(pooled("occ", config.people_mode)[0], t)
        report.mpjpe_occ = _mpjpe(pooled("occ", "matched")[0])
        report.label_counts = joint_label_counts(matchings, [f.labels for f in frames])
    report.per_joint = {name: _pck(rel_errors[rel_joints == j], t) for j, name in enumerate(SKELETON.joint_names)}
    report.matched_count = sum(len(m.pairs) for m in matchings)
    report.total_gt = sum(len(f.gts) for f in frames)
    report.total_pred = sum(len(f.preds) for f in frames)
    report.false_positives = sum(len(m.unmatched_preds) for m in matchings)
    return report


def read_prediction_frame(path):
    data = read_bridge_file(path)
    return data, [PersonEstimate.from_dict(p) for p in data["people"]]


def load_frames(dataset_dir, predictions_dir):
    """Pair every record's ground truth and labels with the prediction file of the same stem."""
    frames = []
    for index in list_records(dataset_dir):
        sidecar = read_bridge_file(get_sidecar_path(dataset_dir, index))
        gts = [Pose3D.from_dict(p) for p in sidecar["people"]]
        labels = sidecar.get("occlusionLabels")
        path = Path(predictions_dir) / get_sidecar_path(dataset_dir, index).name
        _, people = read_prediction_frame(require_input(path, "prediction file"))
        preds = [p.pose3d for p in people if p.pose3d is not None]
        frames.append(EvalFrame(preds, gts, None if labels is None else np.asarray(labels, dtype=np.int64), index))
    return frames


# =============================================================================
# OPERATORS
# =============================================================================

class Evaluate(Operator):
    """Score predictions of a dataset against its ground truth"""
    idname = "eval"
    label = "Evaluate"

    def execute(self, context):
        dataset_dir = require_input(context.input("dataset"), "dataset directory")
        predictions_dir = require_input(context.input("predictions"), "predictions directory")
        frames = load_frames(dataset_dir, predictions_dir)
        report = evaluate(frames, context.config.eval)
        run_dir = recursively_create_directories(context.run_dir)
        write_bridge_file(report.to_dict(), run_dir / "metrics.json")
        self.report({'INFO'}, f"PCK rel {report.pck_rel}, PCK occ {report.pck_occ}, "
                              f"matched {report.matched_count}/{report.total_gt}")
        return {'FINISHED'}
