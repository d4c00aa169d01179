# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""Command operators: the unit every CLI subcommand dispatches to."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger("occlupose")

_REPORT_LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
}


@dataclass
class RunContext:
    """What an operator sees when it runs: effective config, run directory and parsed inputs."""
    config: object
    run_dir: Path
    inputs: dict = field(default_factory=dict)

    def input(self, name, default=None):
        return self.inputs.get(name, default)


class Operator:
    """Base command. Subclasses set ``idname`` and ``label`` and implement ``execute``."""
    idname = ""
    label = ""
    description = ""

    def __init__(self):
        self.reports = []

    @classmethod
    def poll(cls, context):
        return True

    def execute(self, context):
        raise NotImplementedError

    def report(self, levels, message):
        level = max(_REPORT_LEVELS.get(name, logging.INFO) for name in levels)
        self.reports.append((sorted(levels)[0], message))
        logger.log(level, "%s: %s", self.idname, message)

    def run(self, context):
        if not self.poll(context):
            self.report({'ERROR'}, "Preconditions not met")
            return {'CANCELLED'}
        return self.execute(context)
