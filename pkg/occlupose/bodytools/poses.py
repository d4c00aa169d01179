# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""Pose containers. Missing joints are stored as NaN rows."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .skeleton import J, SKELETON


@dataclass(frozen=True, eq=False)
class Pose3D:
    joints: np.ndarray
    person_id: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (J, 3):
            raise ValidationError(f"Pose3D expects ({J}, 3) joints, got {joints.shape}")
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)

    @property
    def present(self):
        return np.all(np.isfinite(self.joints), axis=1)

    @property
    def root(self):
        return self.joints[0]

    def bone_lengths(self):
        parents = np.array([p for p, _ in SKELETON.edges])
        children = np.array([c for _, c in SKELETON.edges])
        return np.linalg.norm(self.joints[children] - self.joints[parents], axis=1)

    def check(self):
        """Raise unless the present joints sit in front of the camera with non-degenerate bones."""
        present = self.present
        if np.any(self.joints[present, 2] <= 0):
            raise ValidationError(f"person {self.person_id} has joints behind the camera")
        lengths = self.bone_lengths()
        if np.any(lengths[np.isfinite(lengths)] <= 0):
            raise ValidationError(f"person {self.person_id} has a zero-length bone")
        return self

    def translated(self, offset):
        return Pose3D(self.joints + np.asarray(offset, dtype=np.float64), self.person_id)

    def to_dict(self):
        return {"personId": int(self.person_id),
                "joints": [[None if not np.isfinite(c) else float(c) for c in row] for row in self.joints]}

    @classmethod
    def from_dict(cls, data):
        rows = [[np.nan if c is None else c for c in row] for row in data["joints"]]
        return cls(np.array(rows, dtype=np.float64), int(data.get("personId", 0)))


@dataclass(frozen=True, eq=False)
class Pose2D:
    joints: np.ndarray
    confidences: np.ndarray
    depths: np.ndarray = field(default=None)

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        conf = np.asarray(self.confidences, dtype=np.float64)
        if joints.shape != (J, 2) or conf.shape != (J,):
            raise ValidationError("Pose2D expects 15 joints and 15 confidences")
        if np.any((conf < 0) | (conf > 1)):
            raise ValidationError("confidences must lie in [0, 1]")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "confidences", conf)
        if self.depths is not None:
            object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float64))
