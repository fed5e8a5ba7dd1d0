"""Seeded procedural fundus-like fixtures.

Real fundus data cannot ship with the package, so tests and the end-to-end
walkthrough run on generated stand-ins: a bright retina disk on a black
field, with per-class lesion texture (dot count and contrast grow with the
stage label). Generation is a pure function of the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .preprocess import RasterImage, write_png

STAGE_BASE_BRIGHTNESS = (150, 135, 120, 105, 90)
STAGE_DOT_COUNT = (0, 6, 14, 24, 36)


def synthetic_fundus(
    seed: int,
    size: int = 128,
    stage: int = 0,
    radius_fraction: float = 0.42,
) -> RasterImage:
    """One fundus-like disk image for the given stage label."""
    rng = np.random.default_rng(seed)
    radius = max(3, int(size * radius_fraction))
    cy = cx = size // 2

    canvas = np.zeros((size, size, 3), dtype=np.float64)
    yy = (np.arange(size) - cy)[:, None]
    xx = (np.arange(size) - cx)[None, :]
    inside = yy * yy + xx * xx <= radius * radius

    base = STAGE_BASE_BRIGHTNESS[stage]
    disk = np.zeros((size, size, 3), dtype=np.float64)
    disk[..., 0] = base * 1.25  # reddish retina tint
    disk[..., 1] = base * 0.85
    disk[..., 2] = base * 0.55
    disk += rng.normal(0.0, 6.0, size=(size, size, 3))
    canvas[inside] = disk[inside]

    # lesions: small bright (exudate-like) and dark (haemorrhage-like) dots
    for _ in range(STAGE_DOT_COUNT[stage]):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        dist = rng.uniform(0.0, radius * 0.8)
        dy, dx = int(cy + dist * np.sin(ang)), int(cx + dist * np.cos(ang))
        dot_r = int(rng.integers(1, max(2, size // 32)))
        value = 255.0 if rng.random() < 0.5 else 25.0
        y0, y1 = max(0, dy - dot_r), min(size, dy + dot_r + 1)
        x0, x1 = max(0, dx - dot_r), min(size, dx + dot_r + 1)
        patch = inside[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1][patch] = value

    return RasterImage(np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8))


def make_class_images(
    seed: int, per_class: int, size: int, stages=(0, 1, 2, 3, 4)
) -> tuple[np.ndarray, np.ndarray]:
    """In-memory image set: (images float32 (n, size, size, 3), labels int (n,))."""
    images, labels = [], []
    counter = 0
    for stage in stages:
        for _ in range(per_class):
            img = synthetic_fundus(seed * 100003 + counter, size=size, stage=stage)
            images.append(img.pixels.astype(np.float32))
            labels.append(stage)
            counter += 1
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def generate_dataset_tree(root, per_class: int, seed: int, size: int = 128) -> dict:
    """Write the stage-directory layout root/{0..4}/*.png and return counts."""
    root = Path(root)
    counts = {}
    counter = 0
    for stage in range(5):
        stage_dir = root / str(stage)
        stage_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = synthetic_fundus(seed * 100003 + counter, size=size, stage=stage)
            write_png(img, stage_dir / f"img_{i:03d}.png")
            counter += 1
        counts[str(stage)] = per_class
    return counts
