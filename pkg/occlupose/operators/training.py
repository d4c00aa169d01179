# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""Shared training plumbing: seeding, the on-disk scene dataset, batching and loss curves."""

import logging
import random
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from ..errors import NumericError, ValidationError
from ..props import BoolProperty, FloatProperty, IntProperty
from .files import list_records, read_bridge_file, get_sidecar_path, write_csv_rows
from .occlusion import load_masks
from .targets import SPLITS, HeatmapSet, load_targets

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = IntProperty(name="Epochs", description="Passes over the training set", default=10, min=1)
    batch_size: int = IntProperty(name="Batch Size", description="Scenes per optimizer step", default=8, min=1)
    learning_rate: float = FloatProperty(name="Learning Rate", description="Adam step size", default=1e-3, min=0.0)
    deterministic: bool = BoolProperty(name="Deterministic",
                                       description="Single-threaded, deterministic kernels for bit-exact reruns",
                                       default=True)


def seed_everything(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class SceneDataset(Dataset):
    """Labelled records of a dataset directory, read from disk on access."""

    def __init__(self, dataset_dir, indices=None, splits=SPLITS):
        self.dataset_dir = dataset_dir
        self.indices = list(list_records(dataset_dir) if indices is None else indices)
        self.splits = tuple(splits)
        if not self.indices:
            raise ValidationError("training needs a non-empty dataset")

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, item):
        index = self.indices[item]
        _, features = load_masks(self.dataset_dir, index)
        _, arrays = load_targets(self.dataset_dir, index)
        record = {"index": index, "features": features.astype(np.float32), "labels": arrays["labels"]}
        for split in self.splits:
            for field in ("keypoints", "pafs", "root_depth", "paf_support", "root_support"):
                record[f"{split}_{field}"] = arrays[f"{split}_{field}"]
        record["root_visible"] = arrays["root_samples_visible"]
        record["root_all"] = arrays["root_samples_all"]
        return record

    def sidecar(self, item):
        return read_bridge_file(get_sidecar_path(self.dataset_dir, self.indices[item]))


class RecordList(Dataset):
    """In-memory records with the same keys as ``SceneDataset`` items."""

    def __init__(self, records):
        self.records = list(records)
        if not self.records:
            raise ValidationError("training needs a non-empty dataset")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, item):
        return self.records[item]


def collate_records(items):
    batch = {"index": [item["index"] for item in items],
             "features": torch.from_numpy(np.stack([item["features"] for item in items])).permute(0, 3, 1, 2).contiguous()}
    for split in SPLITS:
        if f"{split}_keypoints" not in items[0]:
            continue
        batch[split] = HeatmapSet(*(torch.from_numpy(np.stack([item[f"{split}_{field}"] for item in items])).float()
                                    for field in ("keypoints", "pafs", "root_depth")),
                                  paf_support=torch.from_numpy(np.stack([item[f"{split}_paf_support"] for item in items])),
                                  root_support=torch.from_numpy(np.stack([item[f"{split}_root_support"] for item in items])))
    batch["root_visible"] = [item["root_visible"] for item in items]
    batch["root_all"] = [item["root_all"] for item in items]
    batch["labels"] = [item["labels"] for item in items]
    return batch


def make_loader(dataset, batch_size, seed, shuffle=True):
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, num_workers=0,
                      collate_fn=collate_records, generator=torch.Generator().manual_seed(seed))


def guard_finite(total, terms, **where):
    if not torch.isfinite(total):
        diagnostics = dict(where)
        diagnostics.update({name: float(value.detach()) for name, value in terms.items()})
        raise NumericError(f"non-finite loss at {where}", diagnostics)


class LossCurve:
    """Per-epoch means of every loss term."""

    def __init__(self):
        self.rows = []
        self._sums = {}
        self._count = 0

    def add(self, terms):
        for name, value in terms.items():
            self._sums[name] = self._sums.get(name, 0.0) + float(value)
        self._count += 1

    def close_epoch(self, epoch):
        for name in sorted(self._sums):
            self.rows.append((epoch, name, self._sums[name] / max(self._count, 1)))
        self._sums, self._count = {}, 0

    def values(self, term):
        return [value for _, name, value in self.rows if name == term]

    def write(self, path):
        write_csv_rows(path, ("epoch", "term", "value"), [(e, n, repr(v)) for e, n, v in self.rows])
