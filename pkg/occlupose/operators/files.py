# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
On-disk formats.

Every record is a JSON sidecar (camelCase keys, ``indent=4``) next to a zip
container of ``.npy`` members. Containers are written with a fixed member
timestamp, so the same arrays always produce the same bytes; they still load
with ``numpy.load``. Checkpoints are containers too, with a ``config.json``
member carrying the format version, model kind and config echo.
"""

import csv
import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from ..errors import MissingInputError, ValidationError

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_META_MEMBER = "config.json"


def read_bridge_file(file_path):
    with open(file_path, 'r') as f:
        return json.load(f)


def write_bridge_file(obj, file_path):
    with open(file_path, 'w') as f:
        json.dump(obj, f, indent=4)
        f.write("\n")


def recursively_create_directories(path):
    if not os.path.exists(path):
        os.makedirs(path)
    return Path(path)


def clean_path(path):
    return str(path).replace('\\', '/').replace('//', '/')


def require_input(path, what="input"):
    if path is None:
        raise MissingInputError(f"no {what} given")
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{what} not found: {clean_path(path)}")
    return path


# =============================================================================
# ARRAY CONTAINERS
# =============================================================================

def _member(name):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.external_attr = 0o644 << 16
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def write_array_container(path, arrays, meta=None):
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), buf.getvalue())
        if meta is not None:
            zf.writestr(_member(_META_MEMBER), json.dumps(meta, indent=4, sort_keys=True))


def read_array_container(path):
    """Returns (arrays, meta); meta is None when the container has no config member."""
    path = require_input(path, "array container")
    arrays, meta = {}, None
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == _META_MEMBER:
                meta = json.loads(data.decode("utf-8"))
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, meta


def write_checkpoint(path, kind, config, state_dict, extra=None):
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in state_dict.items()}
    meta = {"formatVersion": FORMAT_VERSION, "kind": kind, "config": config}
    if extra:
        meta.update(extra)
    write_array_container(path, arrays, meta)


def read_checkpoint(path, kind=None):
    import torch

    arrays, meta = read_array_container(path)
    if meta is None or meta.get("formatVersion") != FORMAT_VERSION:
        raise ValidationError(f"{clean_path(path)} is not a version {FORMAT_VERSION} checkpoint")
    if kind is not None and meta.get("kind") != kind:
        raise ValidationError(f"{clean_path(path)} holds a '{meta.get('kind')}' model, expected '{kind}'")
    state = {name: torch.from_numpy(array.copy()) for name, array in arrays.items()}
    return state, meta


# =============================================================================
# TABLES
# =============================================================================

def write_csv_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv_rows(path):
    with open(require_input(path, "table"), newline="") as f:
        return list(csv.DictReader(f))


# =============================================================================
# DATASET LAYOUT
# =============================================================================

def get_record_stem(dataset_dir, index):
    return Path(dataset_dir) / f"scene_{index:05d}"


def get_sidecar_path(dataset_dir, index):
    return get_record_stem(dataset_dir, index).with_suffix(".json")


def get_masks_path(dataset_dir, index):
    return get_record_stem(dataset_dir, index).with_suffix(".npz")


def get_targets_path(dataset_dir, index):
    return Path(f"{get_record_stem(dataset_dir, index)}.targets.npz")


def get_manifest_path(dataset_dir):
    return Path(dataset_dir) / "manifest.json"


def list_records(dataset_dir):
    """Record indices listed in the dataset manifest."""
    manifest = read_bridge_file(require_input(get_manifest_path(dataset_dir), "dataset manifest"))
    return [int(i) for i in manifest["records"]]
