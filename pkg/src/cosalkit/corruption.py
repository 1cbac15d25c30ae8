"""Synthetic corruptions applied to the leading half of each image group.

Severity tables live in ``assets/corruption_params.json`` and follow the
common-corruptions benchmark. Every function takes an explicit seed and
is deterministic for a fixed (seed, severity, params).
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from cosalkit.backend.base import check_rgb
from cosalkit.data import ImageGroup, ImageRecord, load_dataset
from cosalkit.errors import ConfigurationError, ValidationError
from cosalkit.io import encode_image, read_rgb, write_json

ASSETS = Path(__file__).parent / "assets"
KINDS = ("frost", "motion_blur", "defocus_blur", "gaussian_noise")
MANIFEST = "corruption_manifest.json"


@lru_cache(maxsize=None)
def _default_params() -> dict:
    with open(ASSETS / "corruption_params.json") as fh:
        return json.load(fh)


def load_params(path=None) -> dict:
    if path is None:
        return json.loads(json.dumps(_default_params()))
    with open(path) as fh:
        return json.load(fh)


def _entry(params: Optional[dict], kind: str, key: str, severity: int):
    if isinstance(severity, bool) or severity not in (1, 2, 3, 4, 5):
        raise ValidationError(f"severity must be an integer in 1..5, got {severity!r}")
    table = (params or _default_params())[kind][key]
    return table[severity - 1]


def _filter(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.stack([ndimage.convolve(image[..., c], kernel, mode="mirror")
                    for c in range(image.shape[2])], axis=-1)
    return np.clip(out, 0.0, 1.0)


def gaussian_noise(image, severity: int = 3, seed: int = 0, params=None, clip: bool = True):
    sigma = float(_entry(params, "gaussian_noise", "sigma", severity))
    img = check_rgb(image)
    if sigma == 0.0:
        return img.copy()
    noisy = img + np.random.default_rng(seed).normal(scale=sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0) if clip else noisy


def line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized line of ``length`` samples through the centre at ``angle_deg``."""
    if length < 1:
        raise ValidationError("motion blur length must be >= 1")
    if length == 1:
        return np.ones((1, 1))
    half = (length - 1) / 2.0
    size = 2 * int(np.ceil(half)) + 1
    c = size // 2
    kernel = np.zeros((size, size))
    theta = np.deg2rad(angle_deg)
    for s in np.arange(length) - half:
        x, y = c + s * np.cos(theta), c - s * np.sin(theta)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        # bilinear splat so off-grid samples keep their full weight
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                w = wy * wx
                if w > 1e-12:
                    kernel[min(y0 + dy, size - 1), min(x0 + dx, size - 1)] += w
    return kernel / kernel.sum()


def motion_blur(image, severity: int = 3, seed: int = 0, params=None, angle: Optional[float] = None):
    length = int(_entry(params, "motion_blur", "length", severity))
    img = check_rgb(image)
    if angle is None:
        max_angle = (params or _default_params())["motion_blur"].get("max_angle_deg", 45.0)
        angle = float(np.random.default_rng(seed).uniform(-max_angle, max_angle))
    if length == 1:
        return img.copy()
    return _filter(img, line_kernel(length, angle))


def disk_kernel(radius: float) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1))
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return disk / disk.sum()


def defocus_blur(image, severity: int = 3, seed: int = 0, params=None):
    radius = float(_entry(params, "defocus_blur", "radius", severity))
    img = check_rgb(image)
    if radius <= 0:
        return img.copy()
    return _filter(img, disk_kernel(radius))


def _frost_textures(params) -> list:
    names = (params or _default_params())["frost"].get("textures", [])
    paths = [ASSETS / "frost" / n for n in names]
    missing = [str(p) for p in paths if not p.is_file()]
    if not paths or missing:
        raise ConfigurationError(f"frost overlay textures missing: {missing or 'none configured'}")
    return paths


def frost_overlay(shape, seed: int, params=None) -> np.ndarray:
    """Random crop (texture chosen by seed) covering an image of ``shape``."""
    h, w = shape[:2]
    rng = np.random.default_rng(seed)
    paths = _frost_textures(params)
    texture = read_rgb(paths[int(rng.integers(len(paths)))])
    th, tw = texture.shape[:2]
    scale = max(h / th, w / tw, 1.0)
    if scale > 1.0:
        nh, nw = int(np.ceil(th * scale)), int(np.ceil(tw * scale))
        texture = np.asarray(Image.fromarray((texture * 255).round().astype(np.uint8))
                             .resize((nw, nh), Image.BILINEAR), dtype=np.float64) / 255.0
        th, tw = nh, nw
    y = int(rng.integers(0, th - h + 1))
    x = int(rng.integers(0, tw - w + 1))
    return texture[y:y + h, x:x + w]


def frost(image, severity: int = 3, seed: int = 0, params=None):
    a = float(_entry(params, "frost", "image_weight", severity))
    b = float(_entry(params, "frost", "overlay_weight", severity))
    img = check_rgb(image)
    if b == 0.0:
        return np.clip(a * img, 0.0, 1.0)
    return np.clip(a * img + b * frost_overlay(img.shape, seed, params), 0.0, 1.0)


CORRUPTIONS = {
    "frost": frost,
    "motion_blur": motion_blur,
    "defocus_blur": defocus_blur,
    "gaussian_noise": gaussian_noise,
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3
    seed: int = 0
    fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValidationError(f"unknown corruption {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.severity, bool) or self.severity not in (1, 2, 3, 4, 5):
            raise ValidationError(f"severity must be an integer in 1..5, got {self.severity!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError(f"fraction {self.fraction} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def derived_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def corrupt_image(image, spec: CorruptionSpec, name: str = "", params=None) -> np.ndarray:
    return CORRUPTIONS[spec.kind](image, spec.severity, derived_seed(spec.seed, name), params)


def corrupted_names(names, fraction: float) -> list:
    """The lexicographically first ``floor(fraction * N)`` names."""
    n = int(np.floor(fraction * len(names) + 1e-9))
    return sorted(names)[:n]


def corrupt_group(group: ImageGroup, spec: CorruptionSpec, params=None) -> ImageGroup:
    """Corrupt the leading ``floor(fraction * N)`` images; keep the rest as-is."""
    chosen = set(corrupted_names([r.name for r in group.records], spec.fraction))
    records = []
    for rec in group.records:
        if rec.name in chosen:
            pixels = corrupt_image(rec.image(), spec, rec.name, params)
            records.append(ImageRecord(rec.name, pixels=pixels, mask_path=rec.mask_path,
                                       mask_pixels=rec.mask_pixels))
        else:
            records.append(rec)
    return ImageGroup(group.name, records)


def corrupt_dataset(root, out, spec: CorruptionSpec, params=None) -> dict:
    """Write a corrupted copy of ``root`` to ``out`` plus a manifest."""
    dataset = load_dataset(root)
    out = Path(out)
    if out.resolve() == Path(root).resolve():
        raise ConfigurationError("output directory must differ from the input dataset")
    manifest = {
        "format_version": 1,
        **spec.to_dict(),
        "ordering": "lexicographic",
        "params_version": (params or _default_params()).get("version"),
        "groups": {},
    }
    from cosalkit.io import atomic_write_bytes

    for group in dataset.groups:
        corrupted = corrupt_group(group, spec, params)
        touched = []
        for rec in corrupted.records:
            dest = out / group.name / rec.name
            if rec.pixels is None:
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(rec.path, dest)
            else:
                atomic_write_bytes(dest, encode_image(rec.pixels, dest.suffix))
                touched.append(rec.name)
        manifest["groups"][group.name] = touched
    write_json(out / MANIFEST, manifest)
    return manifest
