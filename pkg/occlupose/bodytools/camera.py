# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""Pinhole camera authored directly in camera frame (X right, Y down, Z forward, mm)."""

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ValidationError

STRIDE = 4


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValidationError(f"focal must be positive, got {self.focal}", key="scene.focal")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive", key="scene.image_size")
        if self.width % STRIDE or self.height % STRIDE:
            raise ValidationError(f"image size must be a multiple of {STRIDE}", key="scene.image_size")

    @property
    def principal_point(self):
        return (self.cx, self.cy)

    @property
    def image_size(self):
        return (self.width, self.height)

    @property
    def heatmap_size(self):
        """(w, h) of the prediction grid."""
        return (self.width // STRIDE, self.height // STRIDE)

    def scaled(self, factor):
        """The same view rendered at ``factor`` times the resolution."""
        return Camera(self.focal * factor, self.cx * factor, self.cy * factor,
                      self.width * factor, self.height * factor)

    def to_dict(self):
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["focal"]), float(data["cx"]), float(data["cy"]), int(data["width"]), int(data["height"]))


def project(camera, point):
    X, Y, Z = (float(c) for c in point)
    if Z <= 0:
        raise DomainError(f"cannot project a point with Z={Z}")
    return (camera.focal * X / Z + camera.cx, camera.focal * Y / Z + camera.cy)


def backproject(camera, pixel, depth):
    if depth <= 0:
        raise DomainError(f"cannot backproject to depth {depth}")
    u, v = pixel
    return ((u - camera.cx) * depth / camera.focal, (v - camera.cy) * depth / camera.focal, float(depth))


def project_points(camera, points):
    """Vectorised ``project`` over (..., 3) arrays; rows with Z <= 0 become NaN."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    safe = np.where(z > 0, z, np.nan)
    u = camera.focal * points[..., 0] / safe + camera.cx
    v = camera.focal * points[..., 1] / safe + camera.cy
    return np.stack([u, v], axis=-1)


def backproject_points(camera, pixels, depths):
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (pixels[..., 0] - camera.cx) * depths / camera.focal
    y = (pixels[..., 1] - camera.cy) * depths / camera.focal
    return np.stack([x, y, depths], axis=-1)


def in_view(camera, pixel, depth=1.0):
    """True when the point is in front of the camera and lands on the image."""
    u, v = pixel
    return bool(depth > 0 and 0.0 <= u < camera.width and 0.0 <= v < camera.height)


# Root-depth normalisation. The only place the convention lives.

def encode_depth(camera, depth):
    return depth * camera.heatmap_size[0] / camera.focal


def decode_depth(camera, normalized):
    return normalized * camera.focal / camera.heatmap_size[0]
