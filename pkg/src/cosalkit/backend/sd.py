"""Adapter around a pretrained latent diffusion model loaded with ``diffusers``.

Heavy dependencies are imported on construction so that the rest of the
toolkit works without them. The placeholder is realised as an extra
tokenizer token whose input embedding is overwritten, through a forward
hook, with the placeholder row of each prompt.
"""
from __future__ import annotations

import math
import threading

import numpy as np

from cosalkit.backend.base import (
    PLACEHOLDER,
    Backend,
    BackendDescriptor,
    NoiseSchedule,
    TextEmbeddingSequence,
    check_rgb,
)
from cosalkit.errors import BackendUnavailableError, ShapeError, ValidationError

PLACEHOLDER_TOKEN = "<cosal-concept>"


def _import_stack():
    try:
        import torch
        from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:
        raise BackendUnavailableError(
            f"the diffusion backend needs torch, diffusers and transformers ({exc}); "
            "install the 'sd' extra") from exc
    return torch, AutoencoderKL, DDPMScheduler, UNet2DConditionModel, CLIPTextModel, CLIPTokenizer


class _AttentionRecorder:
    """Cross-attention processor that also keeps one token's probabilities."""

    def __init__(self, torch, name: str, store: dict):
        self.torch = torch
        self.name = name
        self.store = store
        self.token_index = None

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        batch, seq, _ = hidden_states.shape
        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)
        if self.token_index is not None and encoder_hidden_states is not None:
            side = int(math.isqrt(seq))
            self.store[self.name] = (probs[:, :, self.token_index].reshape(-1, side, side)
                                     .detach().double().cpu().numpy())
        out = attn.batch_to_head_dim(self.torch.bmm(probs, value))
        out = attn.to_out[0](out)
        return attn.to_out[1](out)


class StableDiffusionBackend(Backend):
    supports_attention = True

    def __init__(self, model_id: str = "CompVis/stable-diffusion-v1-4", device: str | None = None,
                 local_files_only: bool = False, image_size: int = 512):
        (torch, AutoencoderKL, DDPMScheduler, UNet2DConditionModel, CLIPTextModel,
         CLIPTokenizer) = _import_stack()
        self.torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        try:
            load = dict(pretrained_model_name_or_path=model_id, local_files_only=local_files_only)
            self.tokenizer = CLIPTokenizer.from_pretrained(subfolder="tokenizer", **load)
            self.text_encoder = CLIPTextModel.from_pretrained(subfolder="text_encoder", **load)
            self.vae = AutoencoderKL.from_pretrained(subfolder="vae", **load)
            self.unet = UNet2DConditionModel.from_pretrained(subfolder="unet", **load)
            scheduler = DDPMScheduler.from_pretrained(subfolder="scheduler", **load)
        except (OSError, ValueError) as exc:
            raise BackendUnavailableError(f"cannot load diffusion weights {model_id!r}: {exc}") from exc

        self.tokenizer.add_tokens([PLACEHOLDER_TOKEN])
        # the new row is always overwritten by the hook, so its initial value is irrelevant
        self.text_encoder.resize_token_embeddings(len(self.tokenizer), mean_resizing=False)
        self.placeholder_id = self.tokenizer.convert_tokens_to_ids(PLACEHOLDER_TOKEN)
        for module in (self.text_encoder, self.vae, self.unet):
            module.requires_grad_(False)
            module.eval()
            module.to(self.device)

        alpha_bar = scheduler.alphas_cumprod.double().cpu().numpy()
        self.schedule = NoiseSchedule(alpha_bar)
        self.scaling = float(self.vae.config.scaling_factor)
        factor = 2 ** (len(self.vae.config.block_out_channels) - 1)
        latent = (int(self.vae.config.latent_channels), image_size // factor, image_size // factor)
        self.image_size = image_size
        embeddings = self.text_encoder.get_input_embeddings()
        self.descriptor = BackendDescriptor(
            kind="latent-diffusion-adapter", model_id=model_id, latent_shape=latent,
            d_text=int(embeddings.weight.shape[1]), total_steps=len(alpha_bar), thread_safe=False)

        # the placeholder row reaches the text encoder through this hook
        self._row = None
        self._lock = threading.Lock()
        embeddings.register_forward_hook(self._substitute_row)
        self._attention = {}
        self._recorders = {}
        processors = {}
        for name, proc in self.unet.attn_processors.items():
            if ".attn2." in name:
                rec = _AttentionRecorder(torch, name.rsplit(".processor", 1)[0], self._attention)
                self._recorders[name] = rec
                processors[name] = rec
            else:
                processors[name] = proc
        self.unet.set_attn_processor(processors)

    # hooks

    def _substitute_row(self, module, inputs, output):
        if self._row is None:
            return output
        ids = inputs[0]
        mask = (ids == self.placeholder_id).unsqueeze(-1)
        return self.torch.where(mask, self._row.to(output.dtype), output)

    def _tensor(self, array):
        return self.torch.tensor(np.array(array, dtype=np.float32), device=self.device)

    # autoencoder

    def encode_image(self, image) -> np.ndarray:
        img = check_rgb(image)
        if img.shape[:2] != (self.image_size, self.image_size):
            raise ShapeError(f"expected a {self.image_size}x{self.image_size} image, got {img.shape[:2]}")
        x = self._tensor(img.transpose(2, 0, 1)[None] * 2.0 - 1.0)
        with self.torch.no_grad():
            z = self.vae.encode(x).latent_dist.mean * self.scaling
        return z[0].double().cpu().numpy()

    def decode_latent(self, z, size=None) -> np.ndarray:
        z = self._check_latent(z)
        with self.torch.no_grad():
            x = self.vae.decode(self._tensor(z[None]) / self.scaling).sample
        img = ((x[0].double().cpu().numpy().transpose(1, 2, 0) + 1.0) / 2.0).clip(0.0, 1.0)
        if size is not None and img.shape[:2] != tuple(size):
            from cosalkit.segmentation import resize_image

            img = resize_image(img, tuple(size))
        return img

    # text side

    def token_embedding(self, token: str) -> np.ndarray:
        ids = self.tokenizer(token, add_special_tokens=False).input_ids
        if len(ids) != 1:
            raise ValidationError(f"{token!r} is not a single token for this tokenizer")
        weight = self.text_encoder.get_input_embeddings().weight
        return weight[ids[0]].detach().double().cpu().numpy()

    def encode_prompt(self, prompt: str) -> TextEmbeddingSequence:
        if prompt.split().count(PLACEHOLDER) > 1:
            raise ValidationError("prompt contains more than one placeholder")
        ids = self.tokenizer(prompt.replace(PLACEHOLDER, PLACEHOLDER_TOKEN), padding="max_length",
                             max_length=self.tokenizer.model_max_length, truncation=True).input_ids
        weight = self.text_encoder.get_input_embeddings().weight
        rows = weight[self.torch.as_tensor(ids)].detach().double().cpu().numpy()
        where = [i for i, tok in enumerate(ids) if tok == self.placeholder_id]
        placeholder = where[0] if where else None
        if placeholder is not None:
            rows[placeholder] = 0.0
        return TextEmbeddingSequence(rows, tuple(ids), placeholder)

    def _encode_text(self, text: TextEmbeddingSequence, row):
        ids = self.torch.as_tensor([text.token_ids], device=self.device)
        self._row = row
        try:
            return self.text_encoder(ids)[0]
        finally:
            self._row = None

    # noise prediction

    def predict_noise(self, z_t, t: int, text: TextEmbeddingSequence) -> np.ndarray:
        t = self.schedule.check_timestep(t)
        z = self._check_latent(z_t)
        with self._lock, self.torch.no_grad():
            row = self._tensor(text.placeholder_row()) if text.placeholder_index is not None else None
            hidden = self._encode_text(text, row)
            eps = self.unet(self._tensor(z[None]), t, encoder_hidden_states=hidden).sample
        return eps[0].double().cpu().numpy()

    def placeholder_grad(self, z_t, t: int, text: TextEmbeddingSequence, upstream) -> np.ndarray:
        t = self.schedule.check_timestep(t)
        z = self._check_latent(z_t)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.latent_shape:
            raise ShapeError(f"upstream shape {upstream.shape} != latent {self.latent_shape}")
        with self._lock, self.torch.enable_grad():
            row = self._tensor(text.placeholder_row()).requires_grad_(True)
            hidden = self._encode_text(text, row)
            eps = self.unet(self._tensor(z[None]), t, encoder_hidden_states=hidden).sample
            (eps[0] * self._tensor(upstream)).sum().backward()
        return row.grad.double().cpu().numpy()

    # attention

    def cross_attention(self, z_t, t: int, text: TextEmbeddingSequence, token_index: int) -> dict:
        if not 0 <= token_index < len(text):
            raise ValidationError(f"token_index {token_index} out of range")
        t = self.schedule.check_timestep(t)
        z = self._check_latent(z_t)
        with self._lock, self.torch.no_grad():
            self._attention.clear()
            for rec in self._recorders.values():
                rec.token_index = token_index
            try:
                row = self._tensor(text.placeholder_row()) if text.placeholder_index is not None else None
                hidden = self._encode_text(text, row)
                self.unet(self._tensor(z[None]), t, encoder_hidden_states=hidden)
            finally:
                for rec in self._recorders.values():
                    rec.token_index = None
            return dict(self._attention)
