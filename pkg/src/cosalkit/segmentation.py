"""Concept-guided segmentation: attention extraction, refinement, thresholding."""
from __future__ import annotations

import importlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from PIL import Image

from cosalkit.backend.base import Backend, check_rgb
from cosalkit.concept import Concept, inject_concept
from cosalkit.errors import BackendUnavailableError, CosalError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentConfig:
    t: int = 400
    threshold: float = 0.5
    head: str = "passthrough"
    head_factory: Optional[str] = None
    layers: Optional[tuple] = None  # None: every layer at the two coarsest resolutions
    prompt_template: str = "a photo of S*"
    noise_seed: int = 0
    working_size: Optional[int] = 512
    workers: int = 1
    fail_fast: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold {self.threshold} outside [0, 1]")
        if self.head not in ("passthrough", "pretrained"):
            raise ValidationError(f"unknown head {self.head!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = None if self.layers is None else list(self.layers)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentConfig":
        return cls(**data)


@dataclass(frozen=True)
class AttentionMap:
    values: np.ndarray
    source_timestep: int
    layers: tuple = ()

    @property
    def resolution(self) -> tuple:
        return self.values.shape


def resize_bilinear(values: np.ndarray, size) -> np.ndarray:
    """Bilinear resampling of a 2-D grid with half-pixel centres and clamped edges."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    out_h, out_w = size
    if (h, w) == (out_h, out_w):
        return values.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bottom = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def resize_image(image: np.ndarray, size: int | tuple) -> np.ndarray:
    """Resize an RGB [0, 1] image with PIL's antialiased bilinear filter."""
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if image.shape[:2] == (h, w):
        return np.asarray(image, dtype=np.float64)
    chans = [np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F")
                        .resize((w, h), Image.BILINEAR)) for c in range(image.shape[2])]
    return np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - lo) / (hi - lo)


def _select_layers(maps: dict, layers) -> list:
    if layers is not None:
        missing = [name for name in layers if name not in maps]
        if missing:
            raise ValidationError(f"backend has no attention layers {missing}")
        return list(layers)
    resolutions = sorted({m.shape[-2:] for m in maps.values()}, key=lambda s: s[0] * s[1])
    keep = set(resolutions[:2])
    return [name for name, m in maps.items() if m.shape[-2:] in keep]


def _noised_latent(image, t: int, backend: Backend, noise_seed: int):
    z0 = backend.encode_image(image)
    eps = np.random.default_rng(noise_seed).standard_normal(z0.shape)
    return backend.add_noise(z0, t, eps)


def extract_attention(image, concept: Concept, t: int, backend: Backend,
                      cfg: SegmentConfig = SegmentConfig()) -> AttentionMap:
    """Cross-attention map of the concept token over latent positions.

    Attention probabilities are averaged over heads, then over the
    selected layers (each upsampled to the finest selected resolution),
    and min-max normalized. A constant map normalizes to all zeros.
    """
    if not backend.supports_attention:
        raise BackendUnavailableError(f"{backend.descriptor.kind} backend cannot capture attention")
    t = backend.schedule.check_timestep(t)
    text = inject_concept(backend.encode_prompt(cfg.prompt_template), concept)
    z_t = _noised_latent(image, t, backend, cfg.noise_seed)
    maps = backend.cross_attention(z_t, t, text, text.placeholder_index)
    names = _select_layers(maps, cfg.layers)
    target = max((maps[n].shape[-2:] for n in names), key=lambda s: s[0] * s[1])
    per_layer = [resize_bilinear(np.mean(maps[n], axis=0), target) for n in names]
    raw = np.mean(per_layer, axis=0)
    return AttentionMap(minmax_normalize(raw), source_timestep=t, layers=tuple(names))


class SegmentationHead:
    """Turns a coarse attention map into an image-resolution soft map."""

    kind = "attention-passthrough"

    def __call__(self, image, concept, attn: AttentionMap, t: int, backend: Backend) -> np.ndarray:
        h, w = image.shape[:2]
        return resize_bilinear(attn.values, (h, w))


class PretrainedHead(SegmentationHead):
    """Adapter around an externally supplied refinement network.

    ``factory`` is an import path ``"package.module:callable"``; the
    callable receives the backend and returns a function
    ``f(z_t, t, text_embedding, attention) -> 2-D array in [0, 1]``.
    """

    kind = "pretrained-adapter"

    def __init__(self, factory: Optional[str], backend: Backend, noise_seed: int = 0,
                 prompt_template: str = "a photo of S*"):
        if not factory:
            raise BackendUnavailableError(
                "pretrained head requested but no head factory (module:callable) was configured")
        module_name, _, attr = factory.partition(":")
        try:
            build = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise BackendUnavailableError(f"cannot load segmentation head {factory!r}: {exc}") from exc
        self.model = build(backend)
        self.noise_seed = noise_seed
        self.prompt_template = prompt_template

    def __call__(self, image, concept, attn, t, backend):
        text = inject_concept(backend.encode_prompt(self.prompt_template), concept)
        z_t = _noised_latent(image, t, backend, self.noise_seed)
        out = np.asarray(self.model(z_t, t, text, attn.values), dtype=np.float64)
        return resize_bilinear(out, image.shape[:2])


def make_head(cfg: SegmentConfig, backend: Backend) -> SegmentationHead:
    if cfg.head == "passthrough":
        return SegmentationHead()
    return PretrainedHead(cfg.head_factory, backend, cfg.noise_seed, cfg.prompt_template)


def fine_segment(image, concept: Concept, attn: AttentionMap, head: SegmentationHead, t: int,
                 backend: Backend) -> np.ndarray:
    """Soft saliency map in [0, 1] at the resolution of ``image``."""
    image = check_rgb(image)
    soft = head(image, concept, attn, t, backend)
    if soft.shape != image.shape[:2]:
        raise CosalError(f"head produced {soft.shape}, expected {image.shape[:2]}")
    return np.clip(soft, 0.0, 1.0)


def binarize(soft: np.ndarray, threshold: float) -> np.ndarray:
    """1 where ``soft >= threshold``, else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} outside [0, 1]")
    return (np.asarray(soft) >= threshold).astype(np.uint8)


class ImageSegmentationError(CosalError):
    def __init__(self, image_id: str, cause: Exception):
        super().__init__(f"{image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


def segment_image(image, concept: Concept, cfg: SegmentConfig, backend: Backend,
                  head: SegmentationHead) -> tuple:
    image = check_rgb(image)
    native = image.shape[:2]
    work = resize_image(image, cfg.working_size) if cfg.working_size else image
    attn = extract_attention(work, concept, cfg.t, backend, cfg)
    soft = fine_segment(work, concept, attn, head, cfg.t, backend)
    if soft.shape != native:
        soft = np.clip(resize_bilinear(soft, native), 0.0, 1.0)
    return soft, binarize(soft, cfg.threshold)


def segment_group(group, concept: Concept, cfg: SegmentConfig, backend: Backend,
                  head: Optional[SegmentationHead] = None, errors: Optional[dict] = None) -> list:
    """Segment every image of ``group`` independently, preserving order.

    ``group`` is an ImageGroup or a sequence of images. With
    ``cfg.fail_fast`` off, failed images yield ``(None, None)`` and their
    errors are recorded in ``errors`` keyed by image id.
    """
    if concept.backend.d_text != backend.descriptor.d_text or \
            concept.backend.kind != backend.descriptor.kind:
        raise ValidationError("concept was learned for a different backend")
    head = head or make_head(cfg, backend)
    if hasattr(group, "records"):
        items = [(rec.name, rec.image) for rec in group.records]
    else:
        items = [(str(i), (lambda img=img: img)) for i, img in enumerate(group)]

    def run(item):
        name, load = item
        try:
            return segment_image(load(), concept, cfg, backend, head)
        except Exception as exc:
            if cfg.fail_fast:
                raise ImageSegmentationError(name, exc) from exc
            log.warning("segmentation failed for %s: %s", name, exc)
            if errors is not None:
                errors[name] = str(exc)
            return None, None

    workers = cfg.workers if backend.descriptor.thread_safe else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, items))
    return [run(item) for item in items]
