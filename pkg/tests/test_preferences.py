# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
import json

import pytest

from occlupose.errors import MissingInputError, ValidationError
from occlupose.preferences import RunConfig, load_config, parse_override, write_config_echo
from occlupose.props import describe_props
from occlupose.operators.files import read_bridge_file


def test_defaults_validate():
    config = load_config()
    assert config.assembly.tau == 0.3
    assert config.precision == 'float32'


def test_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "scene": {"focal": 500.0, "image_width": 128}}))
    config = load_config(path, ["scene.focal=400", "seed=2"], seed=3)
    assert config.scene.focal == 400.0
    assert config.scene.image_width == 128
    assert config.seed == 3


def test_parse_override():
    assert parse_override("dsed.reasoner=hourglass") == {"dsed": {"reasoner": "hourglass"}}
    assert parse_override("detector.stacks = 3") == {"detector": {"stacks": "3"}}
    with pytest.raises(ValidationError):
        parse_override("=3")


@pytest.mark.parametrize("override, key", [
    ("dsed.reasoner=transformer", "dsed.reasoner"),
    ("assembly.tau=1.5", "assembly.tau"),
    ("train.epochs=0", "train.epochs"),
    ("scene.min_people=3", "scene.min_people"),
    ("refine.bone_min=3.0", "refine.bone_min"),
    ("detector.stacks=two", "detector.stacks"),
    ("scene.colour=red", "scene.colour"),
])
def test_rejected_overrides(override, key):
    with pytest.raises(ValidationError) as info:
        load_config(overrides=[override, "scene.max_people=2"])
    assert info.value.key == key


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_config(tmp_path / "nope.json")


def test_section_must_be_object(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"scene": 3}))
    with pytest.raises(ValidationError):
        load_config(path)


def test_config_echo_reloads(tmp_path):
    config = load_config(overrides=["dsed.channel_mode=2d", "assembly.max_people=3"])
    echo = write_config_echo(tmp_path, config)
    again = load_config(echo)
    assert again == config
    assert read_bridge_file(echo)["dsed"]["channel_mode"] == "2d"


def test_every_setting_is_described():
    described = list(describe_props(RunConfig()))
    keys = [key for key, *_ in described]
    assert "scene.occluder_density" in keys
    assert "dsed.use_occ_loss" in keys
    assert all(name for _, name, _, _ in described)


@pytest.mark.parametrize("suite", ["reasoning", "table3"])
def test_ablation_suite_names(suite):
    assert load_config(overrides=[f"ablation.suite={suite}"]).ablation.suite == suite
