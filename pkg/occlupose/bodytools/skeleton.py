# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
The fixed 15-joint skeleton shared by every stage of the pipeline.

Joint order (index: name):
    0 pelvis, 1 neck, 2 head,
    3 l_shoulder, 4 l_elbow, 5 l_wrist, 6 r_shoulder, 7 r_elbow, 8 r_wrist,
    9 l_hip, 10 l_knee, 11 l_ankle, 12 r_hip, 13 r_knee, 14 r_ankle

Edges are (parent, child) pairs listed root outward, so iterating ``edges``
in order always visits a parent before its children. Left/right mirroring
is derived from the joint names, not tabulated.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

# =============================================================================
# JOINT CANON
# =============================================================================

JOINT_NAMES = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

EDGES = (
    (0, 1), (1, 2),
    (1, 3), (3, 4), (4, 5),
    (1, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11),
    (0, 12), (12, 13), (13, 14),
)

TORSO_NAMES = ("pelvis", "neck", "head", "l_shoulder", "r_shoulder", "l_hip", "r_hip")

# Template T-pose offsets (mm) of each edge's child from its parent. The body
# faces the camera (-Z), up is -Y, the person's left is +X.
TEMPLATE_OFFSETS = np.array([
    (0.0, -500.0, 0.0), (0.0, -200.0, 0.0),
    (180.0, 0.0, 0.0), (280.0, 0.0, 0.0), (250.0, 0.0, 0.0),
    (-180.0, 0.0, 0.0), (-280.0, 0.0, 0.0), (-250.0, 0.0, 0.0),
    (100.0, 0.0, 0.0), (0.0, 420.0, 0.0), (0.0, 400.0, 0.0),
    (-100.0, 0.0, 0.0), (0.0, 420.0, 0.0), (0.0, 400.0, 0.0),
])

J = len(JOINT_NAMES)


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def get_side_from_name(name):
    """Determine if a joint is left, right, or center."""
    if name.startswith("l_"):
        return "left"
    if name.startswith("r_"):
        return "right"
    return "center"


def get_mirror_name(name):
    side = get_side_from_name(name)
    if side == "left":
        return "r_" + name[2:]
    if side == "right":
        return "l_" + name[2:]
    return name


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple
    edges: tuple
    torso_set: tuple
    symmetry_pairs: tuple

    def __post_init__(self):
        n = len(self.joint_names)
        if n != J:
            raise ValidationError(f"skeleton must have {J} joints, got {n}")
        if len(self.edges) != n - 1:
            raise ValidationError(f"skeleton must have {n - 1} edges, got {len(self.edges)}")
        parents = {}
        for parent, child in self.edges:
            if child in parents or child == 0:
                raise ValidationError(f"joint {self.joint_names[child]} has more than one parent")
            if parent != 0 and parent not in parents:
                raise ValidationError("edges must be listed root outward")
            parents[child] = parent
        if len(set(self.torso_set)) != 7:
            raise ValidationError("torso set must hold 7 distinct joints")
        for left, right in self.symmetry_pairs:
            if left not in self.torso_set or right not in self.torso_set:
                raise ValidationError("symmetry pairs must lie in the torso set")
            if get_mirror_name(self.joint_names[left]) != self.joint_names[right]:
                raise ValidationError(f"{self.joint_names[left]} does not mirror {self.joint_names[right]}")

    @property
    def parents(self):
        """Parent index per joint, -1 for the pelvis."""
        out = [-1] * len(self.joint_names)
        for parent, child in self.edges:
            out[child] = parent
        return tuple(out)

    @property
    def parent_edge(self):
        """Index of the edge ending at each joint, -1 for the pelvis."""
        out = [-1] * len(self.joint_names)
        for e, (_, child) in enumerate(self.edges):
            out[child] = e
        return tuple(out)

    def incident_edges(self, joint):
        return tuple(e for e, (p, c) in enumerate(self.edges) if joint in (p, c))

    def index(self, name):
        return self.joint_names.index(name)

    def mirror_joint(self, joint):
        return self.index(get_mirror_name(self.joint_names[joint]))

    def mirror_edge(self, edge):
        parent, child = self.edges[edge]
        return self.edges.index((self.mirror_joint(parent), self.mirror_joint(child)))

    def depth_first(self):
        """Joints in depth-first order from the pelvis."""
        children = {j: [] for j in range(len(self.joint_names))}
        for parent, child in self.edges:
            children[parent].append(child)
        order, stack = [], [0]
        while stack:
            joint = stack.pop()
            order.append(joint)
            stack.extend(reversed(children[joint]))
        return order

    def path_from_root(self, joint):
        """Edge indices from the pelvis down to ``joint``."""
        path = []
        edge_of = self.parent_edge
        while joint != 0:
            e = edge_of[joint]
            path.append(e)
            joint = self.edges[e][0]
        return path[::-1]


def build_skeleton():
    torso = tuple(JOINT_NAMES.index(name) for name in TORSO_NAMES)
    pairs = tuple(
        (JOINT_NAMES.index(name), JOINT_NAMES.index(get_mirror_name(name)))
        for name in ("l_hip", "l_shoulder")
    )
    return SkeletonSpec(joint_names=JOINT_NAMES, edges=EDGES, torso_set=torso, symmetry_pairs=pairs)


SKELETON = build_skeleton()
