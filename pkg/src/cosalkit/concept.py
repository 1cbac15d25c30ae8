"""Learning a group concept as a single token embedding.

A concept is the embedding that, substituted for the placeholder token
of a fixed prompt, best explains the group's images under the frozen
diffusion model's denoising objective.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from cosalkit.backend.base import PLACEHOLDER, Backend, BackendDescriptor, TextEmbeddingSequence
from cosalkit.errors import BackendUnavailableError, ConceptLearningError, ValidationError
from cosalkit.resampling import ResamplingConfig, sample_timestep

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONCEPT_SUFFIX = ".concept.json"


@dataclass(frozen=True)
class LearnConfig:
    learning_rate: float = 5e-4
    batch_size: int = 4
    max_steps: int = 2000
    prompt_template: str = f"a photo of {PLACEHOLDER}"
    seed: int = 0
    resampling: Optional[ResamplingConfig] = field(default_factory=ResamplingConfig)
    init_token: str = "object"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be a positive integer")
        if self.max_steps < 0:
            raise ValidationError("max_steps must be nonnegative")
        if PLACEHOLDER not in self.prompt_template.split():
            raise ValidationError(f"prompt_template must contain the placeholder {PLACEHOLDER}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resampling"] = None if self.resampling is None else self.resampling.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "LearnConfig":
        data = dict(data)
        res = data.pop("resampling", None)
        return cls(resampling=None if res is None else ResamplingConfig.from_dict(res), **data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Concept:
    embedding: np.ndarray
    backend: BackendDescriptor
    placeholder_token: str = PLACEHOLDER
    source: str = "learned"
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size != self.backend.d_text:
            raise ValidationError(
                f"embedding has shape {emb.shape}, backend expects ({self.backend.d_text},)")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embedding contains non-finite values")
        if self.source not in ("learned", "vocabulary"):
            raise ValidationError(f"unknown concept source {self.source!r}")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "placeholder_token": self.placeholder_token,
            "source": self.source,
            "embedding": [float(v) for v in self.embedding],
            "training_meta": self.training_meta,
            "backend": self.backend.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Concept":
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported concept format_version {version!r}")
        return cls(embedding=np.array(data["embedding"], dtype=np.float64),
                   backend=BackendDescriptor.from_dict(data["backend"]),
                   placeholder_token=data["placeholder_token"], source=data["source"],
                   training_meta=data.get("training_meta", {}))

    def save(self, path, extra: Optional[dict] = None) -> Path:
        from cosalkit.io import write_json

        payload = self.to_dict()
        if extra:
            payload.update(extra)
        return write_json(path, payload)

    @classmethod
    def load(cls, path) -> "Concept":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def inject_concept(text: TextEmbeddingSequence, concept) -> TextEmbeddingSequence:
    """Return a copy of ``text`` with the placeholder row replaced.

    ``concept`` may be a :class:`Concept` or a bare embedding vector.
    """
    if text.placeholder_index is None:
        raise ValidationError("prompt embedding has no placeholder position")
    emb = concept.embedding if isinstance(concept, Concept) else np.asarray(concept, dtype=np.float64)
    if emb.shape != (text.d_text,):
        raise ValidationError(f"concept dimension {emb.shape} != text dimension ({text.d_text},)")
    rows = text.rows.copy()
    rows[text.placeholder_index] = emb
    return TextEmbeddingSequence(rows, text.token_ids, text.placeholder_index)


def _loss_and_grad(backend: Backend, latents: Sequence[np.ndarray], text: TextEmbeddingSequence,
                   rng: np.random.Generator, resampling) -> tuple:
    """Batch-mean denoising MSE and its gradient w.r.t. the placeholder row."""
    batch = len(latents)
    total = backend.schedule.total_steps
    loss = 0.0
    grad = np.zeros(text.d_text)
    for z0 in latents:
        eps = rng.standard_normal(z0.shape)
        t = sample_timestep(resampling, rng, total)
        z_t = backend.add_noise(z0, t, eps)
        residual = backend.predict_noise(z_t, t, text) - eps
        n = residual.size
        loss += float(np.mean(residual ** 2)) / batch
        grad += backend.placeholder_grad(z_t, t, text, 2.0 * residual / (n * batch))
    return loss, grad


def concept_loss(concept: Concept, image_batch, rng: np.random.Generator, cfg: LearnConfig,
                 backend: Backend) -> tuple:
    """Denoising loss of ``concept`` on a batch of images, and its gradient.

    Each image is encoded, noised at a timestep drawn from
    ``cfg.resampling`` with fresh standard-normal noise, and the squared
    residual of the noise prediction is averaged over latent elements and
    over the batch. The gradient is taken with respect to the concept
    embedding only.
    """
    if len(image_batch) == 0:
        raise ValidationError("image batch is empty")
    _check_backend(concept, backend)
    text = inject_concept(backend.encode_prompt(cfg.prompt_template), concept)
    latents = [backend.encode_image(img) for img in image_batch]
    return _loss_and_grad(backend, latents, text, rng, cfg.resampling)


class Adam:
    """Adam on a single vector, with optional decoupled weight decay."""

    def __init__(self, params: np.ndarray, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = np.array(params, dtype=np.float64)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.step_count = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.step_count)
        v_hat = self.v / (1 - b2 ** self.step_count)
        if self.weight_decay:
            self.params = self.params * (1 - self.lr * self.weight_decay)
        self.params = self.params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.params


def concept_from_token(token: str, backend: Backend) -> Concept:
    """Concept taken straight from the vocabulary, e.g. for upper-bound runs."""
    return Concept(embedding=backend.token_embedding(token), backend=backend.descriptor,
                   placeholder_token=PLACEHOLDER, source="vocabulary",
                   training_meta={"token": token})


def learn_concept(group, cfg: LearnConfig, backend: Backend,
                  on_step: Optional[Callable[[int, float], None]] = None) -> Concept:
    """Optimise a concept embedding on ``group`` (images or an ImageGroup).

    Starts from ``cfg.init_token``'s vocabulary row and runs
    ``cfg.max_steps`` Adam steps, each on ``cfg.batch_size`` images drawn
    with replacement. ``on_step(step, loss)`` is called after every step.
    """
    images = list(group.images()) if hasattr(group, "images") else list(group)
    if not images:
        raise ValidationError("cannot learn a concept from an empty group")
    latents = [backend.encode_image(img) for img in images]
    text = backend.encode_prompt(cfg.prompt_template)
    rng = np.random.default_rng(cfg.seed)

    init = backend.token_embedding(cfg.init_token)
    opt = Adam(init, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    first_loss = last_loss = None
    for step in range(cfg.max_steps):
        idx = rng.integers(0, len(latents), size=cfg.batch_size)
        batch = [latents[i] for i in idx]
        # divergence is reported below, not through numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = _loss_and_grad(backend, batch, inject_concept(text, opt.params), rng,
                                        cfg.resampling)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise ConceptLearningError(
                f"non-finite loss at step {step}: loss={loss}, "
                f"|embedding|={np.linalg.norm(opt.params):.4g}, |grad|={np.linalg.norm(grad):.4g}")
        opt.step(grad)
        if first_loss is None:
            first_loss = loss
        last_loss = loss
        if on_step is not None:
            on_step(step, loss)
        if step % 500 == 0:
            log.debug("step %d loss %.6g", step, loss)

    meta = {
        "steps": cfg.max_steps,
        "lr": cfg.learning_rate,
        "batch": cfg.batch_size,
        "alpha": None if cfg.resampling is None else cfg.resampling.alpha,
        "seed": cfg.seed,
        "init_token": cfg.init_token,
        "prompt": cfg.prompt_template,
        "first_loss": first_loss,
        "final_loss": last_loss,
    }
    return Concept(embedding=opt.params, backend=backend.descriptor, placeholder_token=PLACEHOLDER,
                   source="learned", training_meta=meta)


def _check_backend(concept: Concept, backend: Backend):
    if backend is None:
        raise BackendUnavailableError("no backend supplied")
    if concept.backend.d_text != backend.descriptor.d_text:
        raise ValidationError(
            f"concept dimension {concept.backend.d_text} != backend dimension {backend.descriptor.d_text}")
