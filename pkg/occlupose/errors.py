# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later


class OccluPoseError(Exception):
    """Base class of every error raised on purpose by the package."""

    exit_code = 1


class ValidationError(OccluPoseError, ValueError):
    """Bad configuration, shapes or preconditions. ``key`` names the offending setting."""

    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DomainError(OccluPoseError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. a point behind the camera)."""


class ConvergenceError(OccluPoseError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NumericError(OccluPoseError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MissingInputError(OccluPoseError, FileNotFoundError):
    exit_code = 3
