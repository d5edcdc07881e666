"""Procedural fixture builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from deadwood.coco_io import CocoCategory
from deadwood.synth import ForegroundInstance, ForegroundLibrary, tight_crop


def make_star_foreground(rng: np.random.Generator, size: int = 28,
                         category_id: int = 1, source_id: str = "fg",
                         points: int | None = None) -> ForegroundInstance:
    """A solid star/round blob cut-out with full alpha inside."""
    if points is None:
        points = int(rng.integers(0, 7))
    wobble = rng.uniform(0.0, 0.35) if points else 0.0
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    dx, dy = xx - cx, yy - cy
    radius = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    r_max = (size / 2.2) * (1.0 + wobble * np.sin(points * theta + phase))
    inside = radius <= r_max
    rgba = np.zeros((size, size, 4), dtype=np.uint8)
    base = rng.integers(120, 200, 3)
    for ch in range(3):
        rgba[:, :, ch][inside] = base[ch]
    rgba[:, :, 3][inside] = 255
    return ForegroundInstance(image=tight_crop(rgba), category_id=category_id,
                              source_id=source_id)


def make_background(rng: np.random.Generator, width: int = 128, height: int = 128) -> np.ndarray:
    """A blocky green-brown texture, as a stand-in forest patch."""
    coarse = rng.integers(30, 110, ((height + 15) // 16 + 1, (width + 15) // 16 + 1, 3))
    texture = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)
    return texture[:height, :width].astype(np.uint8)


def make_library(rng: np.random.Generator, n_foregrounds: int = 6,
                 categories: int = 1, size: int = 28) -> ForegroundLibrary:
    cats = [CocoCategory(id=i + 1, name=f"type_{chr(ord('a') + i)}") for i in range(categories)]
    instances = [
        make_star_foreground(rng, size=int(rng.integers(size - 8, size + 9)),
                             category_id=(i % categories) + 1, source_id=f"fg_{i}")
        for i in range(n_foregrounds)
    ]
    return ForegroundLibrary(instances=instances, categories=cats)


def make_backgrounds(rng: np.random.Generator, count: int = 4,
                     width: int = 128, height: int = 128) -> list[np.ndarray]:
    return [make_background(rng, width, height) for _ in range(count)]
