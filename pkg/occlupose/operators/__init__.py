# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
from ..errors import ValidationError
from .base import Operator, RunContext
from .scenes import SynthGenerate
from .occlusion import LabelGenerate
from .detector import TrainDetector
from .dsed import TrainReasoner
from .refine import TrainRefine
from .pipeline import Infer
from .evalkit import Evaluate
from .ablate import Ablate
from .plot import Plot

_class_registers = [
    SynthGenerate,
    LabelGenerate,
    TrainDetector,
    TrainReasoner,
    TrainRefine,
    Infer,
    Evaluate,
    Ablate,
    Plot,
]

_registry = {}


def register_class(cls):
    if not cls.idname:
        raise ValidationError(f"{cls.__name__} has no idname")
    _registry[cls.idname] = cls


def unregister_class(cls):
    _registry.pop(cls.idname, None)


def register():
    for cls in _class_registers:
        register_class(cls)


def unregister():
    for cls in reversed(_class_registers):
        unregister_class(cls)


def get_operator(idname):
    if not _registry:
        register()
    try:
        return _registry[idname]
    except KeyError:
        raise ValidationError(f"unknown command '{idname}'", key="command")


def registered_commands():
    if not _registry:
        register()
    return list(_registry)
