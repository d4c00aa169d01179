# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Run configuration: one section per module plus the global switches.

Sources in increasing precedence: declared defaults, a JSON file, dotted
``section.key=value`` overrides, then dedicated command-line flags.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import MissingInputError, ValidationError
from .operators.ablate import AblationConfig
from .operators.assembly import AssemblyConfig
from .operators.detector import DetectorConfig, LossWeights
from .operators.dsed import DsedConfig
from .operators.evalkit import EvalConfig
from .operators.files import write_bridge_file
from .operators.refine import RefineConfig
from .operators.scenes import SceneConfig
from .operators.shape_fit import ShapeFitConfig, SSFWeights
from .operators.targets import TargetConfig
from .operators.training import TrainConfig
from .props import EnumProperty, IntProperty, StringProperty, apply_overrides, validate_props

logger = logging.getLogger(__name__)

PRECISION_ITEMS = (
    ('float32', "32-bit", "Default precision for training and inference"),
    ('float64', "64-bit", "Double precision, used by gradient-check suites"),
)


@dataclass
class RunConfig:
    seed: int = IntProperty(name="Seed", description="Global seed for sampling and training", default=0, min=0)
    output_dir: str = StringProperty(name="Output Directory", description="Parent of run directories",
                                     default="runs")
    precision: str = EnumProperty(name="Precision", description="Torch default floating point type",
                                  items=PRECISION_ITEMS, default='float32')
    scene: SceneConfig = field(default_factory=SceneConfig)
    targets: TargetConfig = field(default_factory=TargetConfig)
    ssf: SSFWeights = field(default_factory=SSFWeights)
    shape_fit: ShapeFitConfig = field(default_factory=ShapeFitConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    dsed: DsedConfig = field(default_factory=DsedConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self):
        return asdict(self)


def parse_override(text):
    """'section.key=value' to a nested mapping."""
    if "=" not in text:
        raise ValidationError(f"override '{text}' must look like section.key=value", key=text)
    key, value = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ValidationError(f"override '{text}' has an empty key", key=text)
    nested = value.strip()
    for part in reversed(parts):
        nested = {part: nested}
    return nested


def validate_config(config):
    validate_props(config)
    config.scene.check()
    config.ssf.check()
    if config.refine.bone_min > config.refine.bone_max:
        raise ValidationError("refine.bone_min exceeds refine.bone_max", key="refine.bone_min")
    return config


def load_config(path=None, overrides=(), **flags):
    """Build, override and validate a RunConfig. ``flags`` are top-level fields set last."""
    config = RunConfig()
    if path:
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"configuration file not found: {path}")
        try:
            with open(path, "r") as file:
                data = json.load(file)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path} is not valid JSON: {e}", key=str(path))
        if not isinstance(data, dict):
            raise ValidationError(f"{path} must hold a JSON object", key=str(path))
        apply_overrides(config, data)
    for text in overrides:
        apply_overrides(config, parse_override(text))
    for name, value in flags.items():
        if value is not None:
            apply_overrides(config, {name: value})
    return validate_config(config)


def write_config_echo(run_dir, config):
    path = Path(run_dir) / "config.json"
    write_bridge_file(config.to_dict(), path)
    return path
