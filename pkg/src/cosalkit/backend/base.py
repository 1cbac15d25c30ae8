"""Core types shared by every diffusion backend."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from cosalkit.errors import ShapeError, ValidationError

PLACEHOLDER = "S*"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` of the forward process."""

    alpha_bar: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ValidationError("alpha_bar must be a nonempty 1-D array")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValidationError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValidationError("alpha_bar must be nonincreasing in t")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def total_steps(self) -> int:
        return int(self.alpha_bar.size)

    def __call__(self, t: int) -> float:
        return float(self.alpha_bar[self.check_timestep(t)])

    def check_timestep(self, t) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ValidationError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not 0 <= t < self.total_steps:
            raise ValidationError(f"timestep {t} outside [0, {self.total_steps})")
        return t

    @classmethod
    def scaled_linear(cls, total_steps: int = 1000, beta_start: float = 0.00085,
                      beta_end: float = 0.012) -> "NoiseSchedule":
        # linear in sqrt(beta), the schedule of the SD v1 family
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, total_steps) ** 2
        return cls(np.cumprod(1.0 - betas), name="scaled_linear")

    @classmethod
    def linear(cls, total_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, total_steps)
        return cls(np.cumprod(1.0 - betas), name="linear")


class NoisyLatent(np.ndarray):
    """Latent array that remembers the noise that produced it.

    Only ``add_noise`` sets ``noise``; any arithmetic on the array drops it.
    """

    noise: Optional[np.ndarray]

    def __new__(cls, values, noise=None):
        obj = np.asarray(values, dtype=np.float64).view(cls)
        obj.noise = None if noise is None else np.asarray(noise, dtype=np.float64)
        return obj

    def __array_finalize__(self, obj):
        self.noise = None


def q_sample(z0: np.ndarray, eps: np.ndarray, alpha_bar_t: float) -> NoisyLatent:
    """Mix a clean latent with noise: ``sqrt(ab) * z0 + sqrt(1 - ab) * eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    if not 0.0 <= alpha_bar_t <= 1.0:
        raise ValidationError(f"alpha_bar {alpha_bar_t} outside [0, 1]")
    zt = np.sqrt(alpha_bar_t) * z0 + np.sqrt(1.0 - alpha_bar_t) * eps
    return NoisyLatent(zt, noise=eps)


@dataclass(frozen=True)
class TextEmbeddingSequence:
    """Token-level prompt embedding; one row per token."""

    rows: np.ndarray
    token_ids: tuple
    placeholder_index: Optional[int] = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError("rows must be a 2-D array (tokens x d_text)")
        if rows.shape[0] != len(self.token_ids):
            raise ShapeError(f"{rows.shape[0]} rows but {len(self.token_ids)} token ids")
        idx = self.placeholder_index
        if idx is not None and not 0 <= idx < rows.shape[0]:
            raise ValidationError(f"placeholder_index {idx} out of range")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "token_ids", tuple(self.token_ids))

    def __len__(self):
        return self.rows.shape[0]

    @property
    def d_text(self) -> int:
        return self.rows.shape[1]

    def placeholder_row(self) -> np.ndarray:
        if self.placeholder_index is None:
            raise ValidationError("sequence has no placeholder token")
        return self.rows[self.placeholder_index]


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    model_id: str
    latent_shape: tuple
    d_text: int
    total_steps: int
    thread_safe: bool = True

    KINDS = ("toy", "latent-diffusion-adapter")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_id": self.model_id,
            "latent_shape": list(self.latent_shape),
            "d_text": self.d_text,
            "total_steps": self.total_steps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackendDescriptor":
        return cls(kind=data["kind"], model_id=data["model_id"],
                   latent_shape=tuple(data["latent_shape"]), d_text=int(data["d_text"]),
                   total_steps=int(data["total_steps"]))


class Backend:
    """Frozen latent text-to-image diffusion model.

    Subclasses provide the autoencoder, the text side and the noise
    predictor. Two hooks beyond the forward operations are needed by
    the rest of the toolkit: ``placeholder_grad`` (gradient of a scalar
    through ``predict_noise`` with respect to the placeholder row) and
    ``cross_attention`` (raw token attention maps).
    """

    descriptor: BackendDescriptor
    schedule: NoiseSchedule
    supports_attention: bool = False

    @property
    def latent_shape(self) -> tuple:
        return self.descriptor.latent_shape

    def add_noise(self, z0: np.ndarray, t: int, eps: np.ndarray) -> NoisyLatent:
        t = self.schedule.check_timestep(t)
        z0 = np.asarray(z0, dtype=np.float64)
        if z0.shape != self.latent_shape:
            raise ShapeError(f"latent shape {z0.shape} != backend {self.latent_shape}")
        return q_sample(z0, eps, self.schedule(t))

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_prompt(self, prompt: str) -> TextEmbeddingSequence:
        raise NotImplementedError

    def predict_noise(self, z_t: np.ndarray, t: int, text: TextEmbeddingSequence) -> np.ndarray:
        raise NotImplementedError

    def token_embedding(self, token: str) -> np.ndarray:
        raise NotImplementedError

    def placeholder_grad(self, z_t: np.ndarray, t: int, text: TextEmbeddingSequence,
                         upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cross_attention(self, z_t: np.ndarray, t: int, text: TextEmbeddingSequence,
                        token_index: int) -> dict:
        raise NotImplementedError

    # helpers shared by implementations

    def _check_latent(self, z) -> np.ndarray:
        arr = np.asarray(z, dtype=np.float64)
        if arr.shape != self.latent_shape:
            raise ShapeError(f"latent shape {arr.shape} != backend {self.latent_shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("latent contains non-finite values")
        return arr


def check_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image contains non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    return img


def tokenize(prompt: str) -> Sequence[str]:
    if not prompt or not prompt.strip():
        raise ValidationError("prompt must be nonempty")
    return prompt.split()
