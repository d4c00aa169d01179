# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Grouping fused maps into people and lifting them to 3D.

Candidates live in heatmap cells; PersonEstimate joints are stored in image
pixels (u = 4x). Greedy matching walks the skeleton edges root outward so a
person is always seeded from the root-most edge it has.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from ..bodytools import SKELETON, STRIDE, TEMPLATE_OFFSETS, Pose2D, Pose3D, backproject, decode_depth
from ..errors import DomainError, ValidationError
from ..props import FloatProperty, IntProperty

logger = logging.getLogger(__name__)

TEMPLATE_BONES = np.linalg.norm(TEMPLATE_OFFSETS, axis=1)

DETECTED = "detected"
REASONED = "reasoned"
REFINED = "refined"
MISSING = "missing"


@dataclass
class AssemblyConfig:
    tau: float = FloatProperty(name="Peak Threshold", description="Minimum keypoint value of a candidate",
                               default=0.3, min=1e-6, max=0.999999)
    conf_thresh: float = FloatProperty(name="Root Confidence", description="Confidence a torso joint needs to anchor root depth",
                                       default=0.5, min=0.0, max=1.0)
    max_people: int = IntProperty(name="Max People", description="Upper bound on assembled people",
                                  default=6, min=1, max=64)
    min_limb_score: float = FloatProperty(name="Min Limb Score", description="Pairs scoring below are never connected",
                                          default=0.05, min=-1.0, max=1.0)
    min_joints: int = IntProperty(name="Min Joints", description="Assembled fragments with fewer joints are dropped",
                                  default=2, min=1, max=15)
    limb_samples: int = IntProperty(name="Limb Samples", description="Points sampled along a candidate limb",
                                    default=10, min=2, max=100)
    depth_gate: float = FloatProperty(name="Depth Gate",
                                      description="Depth inconsistency tolerance as a fraction of the depth hint",
                                      default=0.1, min=1e-6)
    shoulder_depth_prior: float = FloatProperty(name="Shoulder Depth Prior",
                                                description="Pelvis minus neck depth (mm) when the torso PAF is absent",
                                                default=0.0)


@dataclass(frozen=True)
class JointCandidate:
    type: int
    position: tuple
    confidence: float
    id: int = 0

    @property
    def cell(self):
        return (int(np.floor(self.position[1] + 0.5)), int(np.floor(self.position[0] + 0.5)))


@dataclass(eq=False)
class PersonEstimate:
    joints2d: np.ndarray = field(default_factory=lambda: np.full((15, 2), np.nan))
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(15))
    rel_depths: np.ndarray = field(default_factory=lambda: np.full(14, np.nan))
    root_depth: float = None
    root_source: str = "unresolved"
    pose3d: Pose3D = None
    provenance: list = field(default_factory=lambda: [MISSING] * 15)
    candidate_ids: np.ndarray = field(default_factory=lambda: np.full(15, -1))
    score: float = 0.0

    @property
    def present(self):
        return np.all(np.isfinite(self.joints2d), axis=1)

    @property
    def pose2d(self):
        """Pixel joints with confidences clipped to [0, 1] and absolute depths once lifted."""
        depths = self.pose3d.joints[:, 2] if self.pose3d is not None else None
        return Pose2D(self.joints2d, np.clip(self.confidences, 0.0, 1.0), depths)

    def to_dict(self):
        joints = []
        pose = self.pose2d
        z = pose.depths if pose.depths is not None else np.full(15, np.nan)
        xyz = self.pose3d.joints if self.pose3d is not None else np.full((15, 3), np.nan)
        for j, name in enumerate(SKELETON.joint_names):
            u, v = pose.joints[j]
            joints.append({
                "name": name,
                "u": float(u) if np.isfinite(u) else None,
                "v": float(v) if np.isfinite(v) else None,
                "z": float(z[j]) if np.isfinite(z[j]) else None,
                "xyz": [float(c) for c in xyz[j]] if np.all(np.isfinite(xyz[j])) else None,
                "confidence": float(pose.confidences[j]),
                "provenance": self.provenance[j],
            })
        return {
            "rootDepth": None if self.root_depth is None else float(self.root_depth),
            "rootDepthSource": self.root_source,
            "score": float(self.score),
            "joints": joints,
            "relativeDepths": [None if not np.isfinite(d) else float(d) for d in self.rel_depths],
        }

    @classmethod
    def from_dict(cls, data):
        person = cls()
        xyz = np.full((15, 3), np.nan)
        for j, joint in enumerate(data["joints"]):
            if joint["u"] is not None:
                person.joints2d[j] = (joint["u"], joint["v"])
            person.confidences[j] = joint["confidence"]
            person.provenance[j] = joint["provenance"]
            if joint.get("xyz") is not None:
                xyz[j] = joint["xyz"]
        person.rel_depths = np.array([np.nan if d is None else d for d in data["relativeDepths"]], dtype=np.float64)
        person.root_depth = data["rootDepth"]
        person.root_source = data["rootDepthSource"]
        person.score = data.get("score", 0.0)
        if person.root_depth is not None:
            person.pose3d = Pose3D(xyz)
        return person


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def _keypoint_array(maps):
    return np.asarray(getattr(maps, "keypoints", maps), dtype=np.float64)


def _subpixel(values, row, col, axis):
    """Offset in [-0.5, 0.5] from a parabola through the log values, or the raw values as fallback."""
    h, w = values.shape
    lo = (row - 1, col) if axis == 0 else (row, col - 1)
    hi = (row + 1, col) if axis == 0 else (row, col + 1)
    if min(lo) < 0 or hi[0] >= h or hi[1] >= w:
        return 0.0
    a, b, c = values[lo], values[row, col], values[hi]
    if a > 0 and b > 0 and c > 0:
        a, b, c = np.log(a), np.log(b), np.log(c)
    denom = a - 2.0 * b + c
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def extract_peaks(fused, tau):
    """
    Local maxima (3x3) of every keypoint channel with value >= tau, greedily
    suppressed so accepted peaks of one channel are more than one cell apart.
    Sorted by confidence, then joint type, then position.
    """
    if not 0 < tau < 1:
        raise ValidationError(f"peak threshold must lie in (0, 1), got {tau}", key="assembly.tau")
    keypoints = _keypoint_array(fused)
    candidates = []
    for j in range(keypoints.shape[-1]):
        channel = keypoints[..., j]
        peaks = (channel == maximum_filter(channel, size=3, mode="constant", cval=-np.inf)) & (channel >= tau)
        rows, cols = np.nonzero(peaks)
        order = sorted(zip(-channel[rows, cols], rows, cols))
        kept = []
        for neg, r, c in order:
            if any(abs(r - kr) <= 1 and abs(c - kc) <= 1 for kr, kc in kept):
                continue
            kept.append((r, c))
            x = c + _subpixel(channel, r, c, axis=1)
            y = r + _subpixel(channel, r, c, axis=0)
            candidates.append(JointCandidate(j, (x, y), float(min(-neg, 1.0))))
    candidates.sort(key=lambda k: (-k.confidence, k.type, k.position[1], k.position[0]))
    return [JointCandidate(k.type, k.position, k.confidence, i) for i, k in enumerate(candidates)]


def _sample_cells(paf, a, b, samples):
    h, w = paf.shape[:2]
    t = np.linspace(0.0, 1.0, samples)
    xs = a.position[0] + t * (b.position[0] - a.position[0])
    ys = a.position[1] + t * (b.position[1] - a.position[1])
    cols = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
    rows = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
    return paf[rows, cols]


def measure_limb(paf, a, b, samples=10):
    """(mean xy alignment with a->b, PAF depth change in mm) along the candidate limb."""
    d = np.array(b.position, dtype=np.float64) - np.array(a.position, dtype=np.float64)
    length = float(np.hypot(d[0], d[1]))
    if length < 1e-9:
        return 0.0, float("nan")
    values = _sample_cells(np.asarray(paf, dtype=np.float64), a, b, samples)
    alignment = float(np.mean(values[:, 0] * d[0] / length + values[:, 1] * d[1] / length))
    if values.shape[1] < 3:
        return alignment, float("nan")
    on = np.hypot(values[:, 0], values[:, 1]) >= 0.5
    dz = float(np.mean(values[on, 2] if on.any() else values[:, 2]))
    return alignment, dz


def implied_depth_change(a, b, dz_paf, bone_length, depth_hint, focal):
    """Out-of-plane bone component implied by the 2D length at depth ``depth_hint``."""
    lateral = np.hypot(b.position[0] - a.position[0], b.position[1] - a.position[1]) * STRIDE * depth_hint / focal
    return float(np.sign(dz_paf) * np.sqrt(max(0.0, bone_length ** 2 - lateral ** 2)))


def score_limb(paf, a, b, root_depth_hint=None, focal=None, bone_length=None, samples=10, depth_gate=0.1):
    """
    Mean PAF alignment along a->b, multiplied by exp(-|dz_paf - dz_implied| / (gate * hint))
    when a depth hint, focal length and bone length are known. Coincident candidates score 0.
    """
    alignment, dz_paf = measure_limb(paf, a, b, samples)
    if alignment == 0.0 and not np.isfinite(dz_paf):
        return 0.0
    if root_depth_hint is None or focal is None or bone_length is None or not np.isfinite(dz_paf):
        return float(np.clip(alignment, -1.0, 1.0))
    implied = implied_depth_change(a, b, dz_paf, bone_length, root_depth_hint, focal)
    penalty = np.exp(-abs(dz_paf - implied) / (depth_gate * root_depth_hint))
    return float(np.clip(alignment * penalty, -1.0, 1.0))


def _depth_hint(root_maps, camera, cell):
    if root_maps is None or camera is None:
        return None
    values = np.asarray(root_maps)[cell[0], cell[1]]
    values = values[values > 0]
    if not len(values):
        return None
    return float(decode_depth(camera, values.max()))


def assemble(candidates, paf, config, root_maps=None, camera=None, diagnostics=None):
    """Greedy per-edge matching in tree order; each candidate joins at most one person."""
    by_type = {}
    for k in candidates:
        by_type.setdefault(k.type, []).append(k)
    paf = np.asarray(paf, dtype=np.float64)
    width = paf.shape[-1] // len(SKELETON.edges)
    owner = {}
    people = []
    hints = []
    dropped_pairs = 0
    focal = camera.focal if camera is not None else None
    for e, (p, c) in enumerate(SKELETON.edges):
        edge_paf = paf[..., width * e:width * e + width]
        pairs = []
        for a in by_type.get(p, ()):
            for b in by_type.get(c, ()):
                person = owner.get(a.id)
                hint = hints[person] if person is not None else None
                if hint is None:
                    hint = _depth_hint(root_maps, camera, a.cell)
                score = score_limb(edge_paf, a, b, hint, focal, TEMPLATE_BONES[e], config.limb_samples,
                                   config.depth_gate)
                if score > config.min_limb_score:
                    pairs.append((-score, a.id, b.id, a, b))
        pairs.sort(key=lambda t: t[:3])
        used_a, used_b = set(), set()
        for neg, _, _, a, b in pairs:
            if a.id in used_a or b.id in used_b or b.id in owner:
                continue
            person = owner.get(a.id)
            if person is None:
                if len(people) >= config.max_people:
                    dropped_pairs += 1
                    continue
                person = len(people)
                est = PersonEstimate()
                est.joints2d[p] = np.array(a.position) * STRIDE
                est.confidences[p] = a.confidence
                est.candidate_ids[p] = a.id
                people.append(est)
                hints.append(_depth_hint(root_maps, camera, a.cell))
                owner[a.id] = person
            est = people[person]
            if np.isfinite(est.joints2d[c]).all():
                continue
            used_a.add(a.id)
            used_b.add(b.id)
            owner[b.id] = person
            est.joints2d[c] = np.array(b.position) * STRIDE
            est.confidences[c] = b.confidence
            est.candidate_ids[c] = b.id
            est.score += -neg
            if width == 3:
                est.rel_depths[e] = measure_limb(edge_paf, a, b, config.limb_samples)[1]
            if hints[person] is None:
                hints[person] = _depth_hint(root_maps, camera, b.cell)
    kept = [est for est in people if est.present.sum() >= config.min_joints]
    for est in kept:
        est.provenance = [DETECTED if ok else MISSING for ok in est.present]
    if diagnostics is not None:
        diagnostics["candidates"] = len(candidates)
        diagnostics["unassigned"] = len(candidates) - len(owner)
        diagnostics["droppedPairs"] = dropped_pairs
        diagnostics["droppedFragments"] = len(people) - len(kept)
    return kept


def tag_provenance(people, detected_keypoints, tau):
    """Mark each present joint detected when the detector's own map already peaks there, reasoned otherwise."""
    keypoints = _keypoint_array(detected_keypoints)
    h, w = keypoints.shape[:2]
    for person in people:
        for j, (u, v) in enumerate(person.joints2d):
            if not (np.isfinite(u) and np.isfinite(v)):
                person.provenance[j] = MISSING
                continue
            row = min(max(int(np.floor(v / STRIDE + 0.5)), 0), h - 1)
            col = min(max(int(np.floor(u / STRIDE + 0.5)), 0), w - 1)
            person.provenance[j] = DETECTED if keypoints[row, col, j] >= tau else REASONED
    return people


def _root_value(person, root_maps, camera, joint, spec):
    u, v = person.joints2d[joint]
    h, w = root_maps.shape[:2]
    row = min(max(int(np.floor(v / STRIDE + 0.5)), 0), h - 1)
    col = min(max(int(np.floor(u / STRIDE + 0.5)), 0), w - 1)
    value = root_maps[row, col, list(spec.torso_set).index(joint)]
    return float(decode_depth(camera, value)) if value > 0 else None


def _path_depth(person, joint, spec):
    return float(sum(person.rel_depths[e] for e in spec.path_from_root(joint) if np.isfinite(person.rel_depths[e])))


def infer_root_depth(person, root_maps, camera, spec=SKELETON, conf_thresh=0.5, shoulder_depth_prior=0.0):
    """
    Root depth by tree search over the torso: pelvis, then the first confident
    symmetric pair (hips, then shoulders), then any single confident torso joint.
    Returns (depth mm, source), or (None, 'unresolved').
    """
    root_maps = np.asarray(root_maps, dtype=np.float64)

    def confident(joint):
        return person.confidences[joint] >= conf_thresh and np.isfinite(person.joints2d[joint]).all()

    if confident(0):
        depth = _root_value(person, root_maps, camera, 0, spec)
        if depth is not None:
            return depth, "pelvis"
    torso_edge = spec.parent_edge[spec.index("neck")]
    for left, right in spec.symmetry_pairs:
        if not (confident(left) and confident(right)):
            continue
        depths = [_root_value(person, root_maps, camera, j, spec) for j in (left, right)]
        if None in depths:
            continue
        mean = 0.5 * (depths[0] + depths[1])
        if spec.joint_names[left].endswith("hip"):
            return mean, "hips"
        offset = person.rel_depths[torso_edge]
        return mean - (offset if np.isfinite(offset) else shoulder_depth_prior), "shoulders"
    for joint in spec.torso_set:
        if joint == 0 or not confident(joint):
            continue
        depth = _root_value(person, root_maps, camera, joint, spec)
        if depth is not None:
            return depth - _path_depth(person, joint, spec), f"single:{spec.joint_names[joint]}"
    return None, "unresolved"


def lift_to_3d(person, camera, spec=SKELETON):
    """
    Backproject the pelvis at the root depth, then walk the tree adding PAF
    depth changes. Depth propagates through joints without 2D positions; those
    joints stay missing in the returned pose.
    """
    if person.root_depth is None or not person.root_depth > 0:
        raise DomainError("cannot lift a person without a resolved root depth")
    joints = np.full((len(spec.joint_names), 3), np.nan)
    depth = np.full(len(spec.joint_names), np.nan)
    depth[0] = person.root_depth
    pelvis = person.joints2d[0]
    if not np.isfinite(pelvis).all():
        hips = [spec.index("l_hip"), spec.index("r_hip")]
        if np.isfinite(person.joints2d[hips]).all():
            pelvis = person.joints2d[hips].mean(axis=0)
    if np.isfinite(pelvis).all():
        joints[0] = backproject(camera, pelvis, depth[0])
    for e, (p, c) in enumerate(spec.edges):
        dz = person.rel_depths[e]
        depth[c] = depth[p] + (dz if np.isfinite(dz) else 0.0)
        if np.isfinite(person.joints2d[c]).all() and depth[c] > 0:
            joints[c] = backproject(camera, person.joints2d[c], depth[c])
    return Pose3D(joints)
