"""Render the frost overlay textures shipped in ``cosalkit/assets/frost``.

Branching ice needles over low-frequency haze, tinted slightly blue.
Run once; the outputs are committed.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter
from scipy import ndimage


def needles(rng, size, n_seeds=60):
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    stack = [(rng.uniform(0, size), rng.uniform(0, size), rng.uniform(0, 2 * np.pi), 4)
             for _ in range(n_seeds)]
    while stack:
        x, y, angle, depth = stack.pop()
        length = rng.uniform(8, 40) * depth / 4
        x2, y2 = x + length * np.cos(angle), y + length * np.sin(angle)
        draw.line([(x, y), (x2, y2)], fill=int(rng.uniform(120, 255)), width=1)
        if depth > 1:
            for _ in range(int(rng.integers(1, 4))):
                stack.append((x2, y2, angle + rng.normal(scale=0.7), depth - 1))
    return np.asarray(canvas.filter(ImageFilter.GaussianBlur(0.8)), dtype=np.float64) / 255.0


def haze(rng, size):
    out = np.zeros((size, size))
    for octave, weight in ((8, 0.5), (32, 0.3), (128, 0.2)):
        small = rng.random((octave, octave))
        out += weight * ndimage.zoom(small, size / octave, order=3)[:size, :size]
    return (out - out.min()) / (out.max() - out.min())


def texture(seed, size=256):
    rng = np.random.default_rng(seed)
    v = 0.25 + 0.3 * haze(rng, size) + 0.8 * needles(rng, size) + rng.normal(scale=0.03, size=(size, size))
    v = np.clip(v, 0, 1)
    rgb = v[..., None] * np.array([0.82, 0.9, 1.0])
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=Path(__file__).parents[1] / "src/cosalkit/assets/frost")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(3):
        Image.fromarray(texture(i)).save(out / f"frost{i + 1}.png", optimize=True)


if __name__ == "__main__":
    main()
