"""Analytic stand-in for a latent diffusion model.

The toy model is small enough for sub-second tests, yet keeps the
structure the rest of the toolkit relies on:

* the autoencoder is an exact average-pool / nearest-unpool pair with a
  3 -> 4 channel projection, so ``decode(encode(x)) == x`` for images
  that are constant on pooling blocks;
* the noise predictor is ``eps_true + A @ (e - e_target)`` where ``e`` is
  the placeholder row of the prompt, so the denoising objective is a
  strictly convex quadratic in ``e`` with its minimum at ``e_target``;
* cross-attention queries are computed from the denoised estimate of
  the clean latent, so a poor concept yields poor attention maps.
"""
from __future__ import annotations

import numpy as np

from cosalkit.backend.base import (
    PLACEHOLDER,
    Backend,
    BackendDescriptor,
    NoiseSchedule,
    TextEmbeddingSequence,
    check_rgb,
    tokenize,
)
from cosalkit.errors import ShapeError, ValidationError

VOCABULARY = (
    "a", "an", "the", "photo", "picture", "of", "with", "in", "on",
    "object", "thing", "cat", "dog", "bird", "car", "bicycle", "apple",
    "banana", "flower", "chair", "house", "person", "boat", "bottle", "cup",
)

# (name, pooled resolution) of the emulated cross-attention layers
ATTENTION_LAYERS = (("down.8", 8), ("down.4", 4), ("up.4", 4), ("up.8", 8))


class ToyBackend(Backend):
    supports_attention = True

    def __init__(self, seed: int = 0, d_text: int = 16, latent_shape=(4, 8, 8),
                 schedule: NoiseSchedule | None = None, n_heads: int = 4,
                 d_head: int = 8, target_token: str = "cat"):
        self.seed = seed
        self.schedule = schedule or NoiseSchedule.scaled_linear()
        channels, lh, lw = latent_shape
        self.descriptor = BackendDescriptor(
            kind="toy", model_id=f"toy-seed{seed}", latent_shape=(channels, lh, lw),
            d_text=d_text, total_steps=self.schedule.total_steps)
        rng = np.random.default_rng(seed)

        self.projection = rng.normal(size=(channels, 3))
        self._unprojection = np.linalg.pinv(self.projection)

        table = rng.normal(scale=0.1, size=(len(VOCABULARY), d_text))
        self._vocab = {tok: i for i, tok in enumerate(VOCABULARY)}
        self._table = table
        self._table.setflags(write=False)
        self._placeholder_row = np.zeros(d_text)

        n_latent = channels * lh * lw
        q, _ = np.linalg.qr(rng.normal(size=(n_latent, d_text)))
        gains = np.linspace(0.5, 2.0, d_text)
        self.response = q * gains  # A: full column rank, condition number 4
        self.response.setflags(write=False)
        base = self._table[self._vocab[target_token]]
        self.target = base + rng.normal(scale=0.03, size=d_text)
        self.target.setflags(write=False)

        self._wq = {name: rng.normal(size=(n_heads, d_head, channels)) for name, _ in ATTENTION_LAYERS}
        self._wk = {name: rng.normal(size=(n_heads, d_head, d_text)) * 6.0 for name, _ in ATTENTION_LAYERS}
        self.d_head = d_head

    # autoencoder

    def _factors(self, h: int, w: int):
        _, lh, lw = self.latent_shape
        if h % lh or w % lw:
            raise ShapeError(f"image size {h}x{w} is not a multiple of the latent grid {lh}x{lw}")
        return h // lh, w // lw

    def encode_image(self, image) -> np.ndarray:
        img = check_rgb(image)
        h, w, _ = img.shape
        fh, fw = self._factors(h, w)
        _, lh, lw = self.latent_shape
        pooled = img.reshape(lh, fh, lw, fw, 3).mean(axis=(1, 3))
        return np.einsum("ck,ijk->cij", self.projection, pooled)

    def decode_latent(self, z, size=None) -> np.ndarray:
        z = self._check_latent(z)
        _, lh, lw = self.latent_shape
        h, w = size or (lh * 8, lw * 8)
        fh, fw = self._factors(h, w)
        rgb = np.einsum("kc,cij->ijk", self._unprojection, z)
        rgb = np.repeat(np.repeat(rgb, fh, axis=0), fw, axis=1)
        return np.clip(rgb, 0.0, 1.0)

    # text side

    def token_embedding(self, token: str) -> np.ndarray:
        try:
            row = self._table[self._vocab[token]]
        except KeyError:
            raise ValidationError(f"token {token!r} is not in the toy vocabulary") from None
        return row.copy()

    def encode_prompt(self, prompt: str) -> TextEmbeddingSequence:
        tokens = tokenize(prompt)
        rows, ids, placeholder = [], [], None
        for pos, tok in enumerate(tokens):
            if tok == PLACEHOLDER:
                if placeholder is not None:
                    raise ValidationError("prompt contains more than one placeholder")
                placeholder = pos
                rows.append(self._placeholder_row)
                ids.append(-1)
            else:
                rows.append(self.token_embedding(tok.lower()))
                ids.append(self._vocab[tok.lower()])
        return TextEmbeddingSequence(np.stack(rows), tuple(ids), placeholder)

    # noise prediction

    def _offset(self, text: TextEmbeddingSequence) -> np.ndarray:
        e = text.placeholder_row()
        if e.shape != self.target.shape:
            raise ShapeError(f"placeholder row has dimension {e.shape[0]}, expected {self.target.size}")
        return (self.response @ (e - self.target)).reshape(self.latent_shape)

    def predict_noise(self, z_t, t: int, text: TextEmbeddingSequence) -> np.ndarray:
        self.schedule.check_timestep(t)
        self._check_latent(z_t)
        noise = getattr(z_t, "noise", None)
        if noise is None:
            raise ValidationError("the toy backend can only denoise latents produced by its add_noise")
        return noise + self._offset(text)

    def placeholder_grad(self, z_t, t: int, text: TextEmbeddingSequence, upstream) -> np.ndarray:
        self.schedule.check_timestep(t)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.latent_shape:
            raise ShapeError(f"upstream shape {upstream.shape} != latent {self.latent_shape}")
        return self.response.T @ upstream.ravel()

    # attention

    def cross_attention(self, z_t, t: int, text: TextEmbeddingSequence, token_index: int) -> dict:
        """Per-layer attention probabilities of ``token_index``, shape (heads, h, w)."""
        if not 0 <= token_index < len(text):
            raise ValidationError(f"token_index {token_index} out of range")
        ab = self.schedule(t)
        eps_hat = self.predict_noise(z_t, t, text)
        x0 = (np.asarray(z_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        c, lh, lw = self.latent_shape
        maps = {}
        for name, res in ATTENTION_LAYERS:
            f = lh // res
            feats = x0.reshape(c, res, f, res, f).mean(axis=(2, 4)) if f > 1 else x0
            q = np.einsum("hdc,cij->hijd", self._wq[name], feats)
            k = np.einsum("hdk,nk->hnd", self._wk[name], text.rows)
            scores = np.einsum("hijd,hnd->hijn", q, k) / np.sqrt(self.d_head)
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            maps[name] = probs[..., token_index]
        return maps
