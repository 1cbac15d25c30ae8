"""Image groups on disk: ``root/<group>/<image>`` with optional masks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from cosalkit.errors import ShapeError, ValidationError
from cosalkit.io import IMAGE_SUFFIXES, read_gray, read_rgb


@dataclass
class ImageRecord:
    """One image, either backed by a file or held in memory."""

    name: str
    path: Optional[Path] = None
    pixels: Optional[np.ndarray] = None
    mask_path: Optional[Path] = None
    mask_pixels: Optional[np.ndarray] = None

    @property
    def stem(self) -> str:
        return Path(self.name).stem

    def image(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise ValidationError(f"{self.name} has neither pixels nor a path")
        return read_rgb(self.path)

    def mask(self) -> Optional[np.ndarray]:
        if self.mask_pixels is not None:
            return self.mask_pixels
        if self.mask_path is None:
            return None
        return (read_gray(self.mask_path) >= 128 / 255).astype(np.uint8)

    def content_bytes(self) -> bytes:
        if self.path is not None and self.pixels is None:
            return self.path.read_bytes()
        return np.ascontiguousarray(self.image()).tobytes()


@dataclass
class ImageGroup:
    name: str
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def images(self) -> Iterator[np.ndarray]:
        for rec in self.records:
            yield rec.image()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for rec in self.records:
            h.update(rec.name.encode())
            h.update(hashlib.sha256(rec.content_bytes()).digest())
        return h.hexdigest()[:16]

    @classmethod
    def from_arrays(cls, name: str, images, masks=None, names=None) -> "ImageGroup":
        names = names or [f"{i:03d}.png" for i in range(len(images))]
        masks = masks if masks is not None else [None] * len(images)
        return cls(name, [ImageRecord(n, pixels=np.array(img, dtype=np.float64), mask_pixels=m)
                          for n, img, m in zip(names, images, masks)])


@dataclass
class GroupDataset:
    root: Path
    groups: list
    gt_root: Optional[Path] = None

    def group(self, name: str) -> ImageGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def __len__(self):
        return len(self.groups)


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not p.name.startswith("."))


def list_groups(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_dataset(root, gt_root=None, check_sizes: bool = True) -> GroupDataset:
    """Index ``root/<group>/<image>`` (and masks ``gt_root/<group>/<stem>.png``).

    Groups and images are sorted lexicographically. Images are decoded
    lazily; sizes of image/mask pairs are checked from file headers.
    """
    root = Path(root)
    gt_root = Path(gt_root) if gt_root is not None else None
    groups = []
    for folder in list_groups(root):
        files = _image_files(folder)
        if not files:
            raise ValidationError(f"group {folder.name!r} contains no images")
        records = []
        for f in files:
            rec = ImageRecord(f.name, path=f)
            if gt_root is not None:
                mask = gt_root / folder.name / f"{f.stem}.png"
                if not mask.is_file():
                    raise ValidationError(f"missing ground-truth mask {mask} for image {f}")
                if check_sizes:
                    _check_pair(f, mask)
                rec.mask_path = mask
            records.append(rec)
        groups.append(ImageGroup(folder.name, records))
    if not groups:
        raise ValidationError(f"no groups found under {root}")
    return GroupDataset(root, groups, gt_root)


def _check_pair(image: Path, mask: Path):
    from PIL import Image

    try:
        with Image.open(image) as a, Image.open(mask) as b:
            sizes = a.size, b.size
    except OSError as exc:
        raise ValidationError(f"cannot read {image} or {mask}: {exc}") from exc
    if sizes[0] != sizes[1]:
        raise ShapeError(f"image {image} is {sizes[0]} but mask {mask} is {sizes[1]}")
