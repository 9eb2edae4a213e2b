# dataset_reader.py - Functions to index paired hazy/clean datasets
'''
A dataset is either a directory laid out as <root>/hazy/*.png and
<root>/clean/*.png (identical basenames, .ppm accepted too) or a
SyntheticSpec that generates pairs in memory. make_dataset() builds a pandas
index (one row per pair) and assigns every pair to train/val/test from a
split preset or explicit fractions. Directory images are loaded lazily.
'''

import os
import sys
from dataclasses import dataclass

import numpy as np
import pandas as pd

# Add parent directory to path to import from src/
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from haze import PRESET_ORDER, generate_pairs
from pairs import DatasetError, ImagePair, Provenance
from readers.image_read import FORMATS, load_image, save_image
from utils import logger

INDEX_COLUMNS = ["id", "split", "source", "hazy_path", "clean_path", "preset", "beta", "A", "depth_kind"]
SPLITS = ("train", "val", "test")

# StateHaze1K: 320/35/45 of 400; RS-Haze: 51300 train / 2700 test
SPLIT_PRESETS = {
    "statehaze1k": (0.8, 0.0875, 0.1125),
    "rshaze": (0.95, 0.0, 0.05),
    "train": (1.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 400
    size: tuple = (64, 64)
    seed: int = 0
    presets: tuple = PRESET_ORDER


def split_fractions(split):
    if isinstance(split, str):
        if split not in SPLIT_PRESETS:
            raise DatasetError(f"unknown split preset {split!r}; choose from {sorted(SPLIT_PRESETS)}")
        return SPLIT_PRESETS[split]
    fractions = tuple(float(f) for f in split)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negative shares summing to 1, got {split}")
    return fractions


def split_counts(n, split="statehaze1k"):
    train, val, _ = split_fractions(split)
    n_train = round(n * train)
    n_val = min(round(n * val), n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n, split="statehaze1k", seed=0):
    counts = split_counts(n, split)
    labels = np.repeat(SPLITS, counts)
    order = np.random.default_rng(seed).permutation(n)
    assigned = np.empty(n, dtype=object)
    assigned[order] = labels
    return list(assigned)


class Dataset:
    def __init__(self, index, pairs=None):
        self.index = index
        self._pairs = dict(pairs or {})

    def __len__(self):
        return len(self.index)

    def ids(self, split=None):
        rows = self.index if split is None else self.index[self.index["split"] == split]
        return list(rows["id"])

    def pairs(self, split=None):
        rows = self.index if split is None else self.index[self.index["split"] == split]
        return [self._pair(row) for row in rows.itertuples(index=False)]

    def _pair(self, row):
        if row.id not in self._pairs:
            self._pairs[row.id] = ImagePair(row.id, load_image(row.hazy_path), load_image(row.clean_path),
                                            Provenance.from_file(row.hazy_path))
        return self._pairs[row.id]

    def counts(self):
        return {split: int((self.index["split"] == split).sum()) for split in SPLITS}


def _image_files(folder):
    if not os.path.isdir(folder):
        raise DatasetError(f"dataset folder not found: {folder}")
    return sorted(name for name in os.listdir(folder) if os.path.splitext(name)[1].lower() in FORMATS)


def read_directory(root):
    hazy_dir, clean_dir = os.path.join(root, "hazy"), os.path.join(root, "clean")
    if not os.path.isdir(root):
        raise DatasetError(f"dataset directory not found: {root}")
    hazy, clean = _image_files(hazy_dir), _image_files(clean_dir)

    unmatched = sorted(set(hazy) ^ set(clean))
    if unmatched:
        side = hazy_dir if unmatched[0] in hazy else clean_dir
        raise DatasetError(f"unpaired image {os.path.join(side, unmatched[0])} "
                           f"({len(unmatched)} unpaired file(s) in total)")
    if not hazy:
        raise DatasetError(f"empty dataset: no .png/.ppm pairs under {root}")

    records = [{"id": os.path.splitext(name)[0], "source": "file",
                "hazy_path": os.path.join(hazy_dir, name), "clean_path": os.path.join(clean_dir, name),
                "preset": "", "beta": np.nan, "A": np.nan, "depth_kind": ""} for name in hazy]
    return records, {}


def _synthetic_records(spec):
    if spec.count < 1:
        raise DatasetError("empty dataset: synthetic count must be positive")
    pairs = generate_pairs(spec.count, spec.size, spec.seed, spec.presets)
    records = [{"id": p.id, "source": "synthetic", "hazy_path": "", "clean_path": "",
                "preset": p.provenance.preset, "beta": p.provenance.beta, "A": p.provenance.A,
                "depth_kind": p.provenance.depth_kind} for p in pairs]
    return records, {p.id: p for p in pairs}


def make_dataset(source, split="statehaze1k", seed=0):
    if isinstance(source, SyntheticSpec):
        records, pairs = _synthetic_records(source)
        where = f"synthetic(count={source.count}, seed={source.seed})"
    else:
        records, pairs = read_directory(str(source))
        where = str(source)

    for record, label in zip(records, assign_splits(len(records), split, seed)):
        record["split"] = label
    index = pd.DataFrame(records, columns=INDEX_COLUMNS)

    dataset = Dataset(index, pairs)
    counts = dataset.counts()
    logger.info(f"✅ Indexed {len(index)} pairs from {where}: "
                f"train/val/test = {counts['train']}/{counts['val']}/{counts['test']}")
    return dataset


def write_dataset(pairs, root):
    for pair in pairs:
        save_image(pair.hazy, os.path.join(root, "hazy", f"{pair.id}.png"))
        save_image(pair.clean, os.path.join(root, "clean", f"{pair.id}.png"))
    logger.info(f"✅ Wrote {len(pairs)} pairs to {root}")
    return len(pairs)
