"""Small synthetic class-per-folder datasets for smoke runs and demos.

Each class has its own hue and stripe orientation; every image adds a random
phase and pixel noise, so a linear probe on decent features can separate the
classes while nothing is trivially identical. A fixed top-to-bottom light
gradient gives tiles a recoverable position, as in natural photographs.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_rng


def toy_image(label: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * label / n_classes
    freq = 2 * np.pi * (2 + label % 3) / size
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    hue = np.array([np.cos(2 * np.pi * label / n_classes + k * 2 * np.pi / 3) for k in range(3)])
    colour = 0.5 + 0.35 * hue
    light = 0.3 + 0.7 * yy / (size - 1)
    img = (0.25 + 0.75 * stripes[..., None] * colour[None, None, :]) * light[..., None]
    img = img + 0.1 * rng.standard_normal((size, size, 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def write_toy_dataset(
    root: str | os.PathLike,
    n_classes: int = 4,
    n_train: int = 32,
    n_val: int = 8,
    size: int = 32,
    seed: int = 0,
) -> Path:
    """Write ``<root>/{train,val}/class_<k>/<split>_<k>_<i>.png``."""
    root = Path(root)
    for split, n in (("train", n_train), ("val", n_val)):
        for c in range(n_classes):
            d = root / split / f"class_{c}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                rng = derive_rng(seed, "toy", split, c, i)
                Image.fromarray(toy_image(c, n_classes, size, rng)).save(d / f"{split}_{c}_{i:04d}.png")
    return root
