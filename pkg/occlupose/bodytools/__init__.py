# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
from .skeleton import SKELETON, SkeletonSpec, JOINT_NAMES, EDGES, TEMPLATE_OFFSETS, J
from .camera import (Camera, STRIDE, project, backproject, project_points, backproject_points,
                     in_view, encode_depth, decode_depth)
from .poses import Pose3D, Pose2D
