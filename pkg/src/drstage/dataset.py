"""Stage-directory dataset ingestion and batch assembly.

The on-disk layout is root/{0,1,2,3,4}/*.{png,jpg,jpeg}: one subdirectory per
retinopathy stage, each file labelled by its directory name. Scanning sorts
entries lexicographically by path so the index never depends on filesystem
enumeration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, InvalidPair, MissingClassDir, MissingRoot
from .preprocess import read_image, resize_bilinear

STAGE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative")
NUM_STAGES = 5
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class DatasetIndex:
    root: str
    entries: list  # [(path string, stage label)] sorted by path
    class_counts: list

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Batch:
    images: np.ndarray   # (n, H, W, 3) float32
    targets: np.ndarray  # (n, k) one-hot float32


def scan_directory(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise MissingRoot(f"dataset root {root} does not exist")
    entries = []
    counts = [0] * NUM_STAGES
    for stage in range(NUM_STAGES):
        stage_dir = root / str(stage)
        if not stage_dir.is_dir():
            raise MissingClassDir(str(stage))
        for path in stage_dir.iterdir():
            if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
                entries.append((str(path), stage))
                counts[stage] += 1
    entries.sort(key=lambda e: e[0])
    return DatasetIndex(str(root), entries, counts)


def select_pair(index: DatasetIndex, a: int, b: int) -> DatasetIndex:
    """Restrict to two stages and remap a -> 0, b -> 1 (pair order kept)."""
    if a == b or not (0 <= a < NUM_STAGES) or not (0 <= b < NUM_STAGES):
        raise InvalidPair(f"({a}, {b}) is not a valid stage pair")
    remap = {a: 0, b: 1}
    entries = [(path, remap[label]) for path, label in index.entries if label in remap]
    counts = [0] * NUM_STAGES
    for _, label in entries:
        counts[label] += 1
    return DatasetIndex(index.root, entries, counts)


def load_batch(entries, target_hw, k, rescale="none") -> Batch:
    """Decode, resize, and one-hot a slice of index entries, in order.

    rescale='none' keeps raw 0..255 values (the historical default, where the
    intended 1/255 factor was written as 255/255); 'unit' divides by 255.
    """
    entries = list(entries)
    if not entries:
        raise EmptyDataset("load_batch needs at least one entry")
    if rescale not in ("none", "unit"):
        raise InvalidPair(f"rescale must be 'none' or 'unit', got {rescale!r}")
    h, w = int(target_hw[0]), int(target_hw[1])
    images = np.empty((len(entries), h, w, 3), dtype=np.float32)
    targets = np.zeros((len(entries), k), dtype=np.float32)
    for i, (path, label) in enumerate(entries):
        img = resize_bilinear(read_image(path), w, h)
        images[i] = img.pixels.astype(np.float32)
        targets[i, label] = 1.0
    if rescale == "unit":
        images /= 255.0
    return Batch(images, targets)


def load_arrays(index: DatasetIndex, target_hw, rescale="none"):
    """Whole-index load as (images, labels) arrays for in-memory training."""
    if not index.entries:
        raise EmptyDataset(f"no images under {index.root}")
    batch = load_batch(index.entries, target_hw, NUM_STAGES, rescale)
    labels = np.asarray([label for _, label in index.entries], dtype=np.int64)
    return batch.images, labels


def shuffled_epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic Fisher-Yates permutation keyed by (seed, epoch)."""
    if n < 1:
        raise EmptyDataset("cannot shuffle an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), int(epoch)]))
    return rng.permutation(n)


def validation_order(n: int) -> np.ndarray:
    """Validation is never shuffled."""
    return np.arange(n)
