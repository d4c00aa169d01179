# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Command-line entry point.

Every subcommand resolves the run configuration, creates its run directory
(config echo, run.log, metrics.json and the command's artifacts) and hands a
RunContext to the operator registered under the same name.

Exit codes: 0 success, 1 other failure, 2 invalid configuration or usage,
3 missing input.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pkg_info
from .errors import MissingInputError, OccluPoseError, ValidationError
from .operators import RunContext, get_operator
from .operators.files import recursively_create_directories, write_bridge_file
from .preferences import PRECISION_ITEMS, RunConfig, load_config, write_config_echo
from .props import describe_props

logger = logging.getLogger("occlupose")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
RUN_LOG_FORMAT = "[%(asctime)s] [%(name)s] [%(levelname)s] %(message)s"

COMMAND_HELP = {
    "synth-gen": "Sample seeded scenes and write masks, features and sidecars",
    "labelgen": "Write occlusion labels and cached target maps for a dataset",
    "train-det": "Train the keypoint / PAF / root-depth detector",
    "train-dsed": "Train the occluded-joint reasoner",
    "train-refine": "Train the pose refiner on synthetic skeletons",
    "infer": "Run the pipeline and write per-frame predictions",
    "eval": "Score predictions against ground truth",
    "ablate": "Train and score the reasoning ablation",
    "plot": "Render loss curves, heatmap overlays and skeletons",
}


def settings_epilog():
    lines = ["settings (--set SECTION.KEY=VALUE, or the same nesting in --config JSON):"]
    for key, _, description, default in describe_props(RunConfig()):
        lines.append(f"  {key} = {default!r}  {description}")
    return "\n".join(lines)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="Global seed")
    common.add_argument("--out", help="Run directory (default: <output_dir>/<command>)")
    common.add_argument("--precision", choices=[key for key, _, _ in PRECISION_ITEMS], help="Torch float type")
    common.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")

    parser = argparse.ArgumentParser(prog="occlupose", description=pkg_info["description"], epilog=settings_epilog(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version="%(prog)s " + ".".join(map(str, pkg_info["version"])))
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    commands = {name: sub.add_parser(name, parents=[common], help=text, description=text)
                for name, text in COMMAND_HELP.items()}

    commands["synth-gen"].add_argument("--count", type=int, default=100, help="Number of scenes")
    commands["synth-gen"].add_argument("--workers", type=int, default=1, help="Worker processes")

    commands["labelgen"].add_argument("--dataset", required=True, help="Dataset directory")
    commands["labelgen"].add_argument("--method", choices=("exact", "ssf", "cylinder"), default="exact",
                                      help="Labeler: exact bodies, shape-fitted bodies or fixed cylinders")

    commands["train-det"].add_argument("--dataset", required=True, help="Labelled dataset directory")

    commands["train-dsed"].add_argument("--dataset", required=True, help="Labelled dataset directory")
    commands["train-dsed"].add_argument("--detector", help="Detector checkpoint (not needed with dsed.mode2_only)")

    commands["train-refine"].add_argument("--count", type=int, help="Synthetic training poses")

    commands["infer"].add_argument("--dataset", required=True, help="Dataset directory")
    commands["infer"].add_argument("--detector", help="Detector checkpoint")
    commands["infer"].add_argument("--reasoner", help="Reasoner checkpoint")
    commands["infer"].add_argument("--refiner", help="Refiner checkpoint")
    commands["infer"].add_argument("--perfect-maps", action="store_true",
                                   help="Group ground-truth maps instead of running the networks")

    commands["eval"].add_argument("--dataset", required=True, help="Labelled dataset directory")
    commands["eval"].add_argument("--predictions", required=True, help="Directory written by infer")

    commands["ablate"].add_argument("--suite", default="reasoning", help="Ablation suite")

    commands["plot"].add_argument("inputs", nargs="*", help="Loss-curve CSV files")
    commands["plot"].add_argument("--dataset", help="Dataset directory for overlays")
    commands["plot"].add_argument("--index", type=int, default=0, help="Record to draw")
    commands["plot"].add_argument("--predictions", help="Directory written by infer")
    return parser


def configure_logging(run_dir, verbose=False):
    level = logging.DEBUG if verbose else logging.INFO
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    file_handler = logging.FileHandler(Path(run_dir) / "run.log", mode="w", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
    logger.setLevel(level)
    logger.propagate = False
    for handler in (console, file_handler):
        handler.setLevel(level)
        logger.addHandler(handler)
    return [console, file_handler]


def release_logging(handlers):
    for handler in handlers:
        logger.removeHandler(handler)
        handler.close()


def _inputs(args):
    skip = {"command", "config", "overrides", "seed", "out", "precision", "verbose", "suite"}
    return {name: value for name, value in vars(args).items() if name not in skip}


def _report_error(error, code, run_dir):
    detail = {"error": type(error).__name__, "message": str(error), "exitCode": code}
    key = getattr(error, "key", None)
    if key:
        detail["key"] = key
    print(json.dumps(detail), file=sys.stderr)
    if run_dir is not None:
        write_bridge_file(detail, Path(run_dir) / "error.json")


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    import torch

    run_dir, handlers = None, []
    try:
        overrides = list(args.overrides)
        if args.command == "ablate":
            overrides.append(f"ablation.suite={args.suite}")
        config = load_config(args.config, overrides, seed=args.seed, precision=args.precision)
        run_dir = recursively_create_directories(args.out or Path(config.output_dir) / args.command)
        handlers = configure_logging(run_dir, args.verbose)
        write_config_echo(run_dir, config)
        torch.set_default_dtype(torch.float64 if config.precision == 'float64' else torch.float32)
        operator = get_operator(args.command)()
        result = operator.run(RunContext(config, run_dir, _inputs(args)))
    except ValidationError as e:
        logger.error("%s", e)
        _report_error(e, 2, run_dir)
        return 2
    except MissingInputError as e:
        logger.error("%s", e)
        _report_error(e, 3, run_dir)
        return 3
    except OccluPoseError as e:
        logger.error("%s", e)
        _report_error(e, 1, run_dir)
        return 1
    finally:
        torch.set_default_dtype(torch.float32)
        release_logging(handlers)
    return 0 if 'FINISHED' in result else 1


def main():
    sys.exit(cli_main())
