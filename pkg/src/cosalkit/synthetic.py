"""Small synthetic co-saliency dataset for smoke runs and tests.

Every image shows one yellow object (ellipse or rectangle, depending on
the group) on a random non-yellow textured background. Yellow is the
colour the default toy backend's target concept attends to.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from cosalkit.io import write_image

OBJECT_COLOR = np.array([0.9, 0.9, 0.1])
SHAPES = ("ellipse", "rectangle")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    while True:
        color = rng.random(3)
        if color[2] > 0.3 or color[1] < 0.6:  # keep clear of yellow
            break
    img = np.empty((size, size, 3))
    img[:] = color
    img += rng.normal(scale=0.03, size=img.shape)
    return img


def _shape_mask(rng: np.random.Generator, size: int, shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    ry, rx = rng.uniform(0.18, 0.32, size=2) * size
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    if shape == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def make_image(rng: np.random.Generator, size: int, shape: str):
    img = _background(rng, size)
    mask = _shape_mask(rng, size, shape)
    img[mask] = OBJECT_COLOR + rng.normal(scale=0.03, size=(mask.sum(), 3))
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def write_synthetic_dataset(root, n_groups: int = 2, n_images: int = 6, size: int = 64,
                            seed: int = 0) -> tuple:
    """Write ``root/images/<group>/*.png`` and ``root/gt/<group>/*.png``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for g in range(n_groups):
        shape = SHAPES[g % len(SHAPES)]
        group = f"{shape}s_{g:02d}"
        for i in range(n_images):
            img, mask = make_image(rng, size, shape)
            write_image(root / "images" / group / f"{group}_{i:03d}.png", img)
            write_image(root / "gt" / group / f"{group}_{i:03d}.png", mask.astype(np.float64))
    return root / "images", root / "gt"


def bundled_dataset() -> tuple:
    """Paths of the synthetic 2-group x 6-image dataset shipped with the package."""
    base = Path(__file__).parent / "assets" / "synthetic"
    return base / "images", base / "gt"
