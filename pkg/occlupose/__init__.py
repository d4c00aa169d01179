# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later

pkg_info = {
    "name": "OccluPose",
    "author": "OccluPose contributors",
    "version": (0, 1, 0),
    "python": (3, 9),
    "description": "Occlusion-aware multi-person 3D pose estimation on synthetic capsule-body scenes.",
    "category": "Computer Vision",
}
