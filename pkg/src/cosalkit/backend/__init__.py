from cosalkit.backend.base import (
    PLACEHOLDER,
    Backend,
    BackendDescriptor,
    NoiseSchedule,
    NoisyLatent,
    TextEmbeddingSequence,
    q_sample,
)
from cosalkit.backend.toy import ToyBackend
from cosalkit.errors import ConfigurationError


def make_backend(kind: str = "toy", model_id: str | None = None, seed: int = 0, **kwargs) -> Backend:
    """Build a backend from its CLI/config name (``toy`` or ``sd``)."""
    if kind == "toy":
        return ToyBackend(seed=seed, **kwargs)
    if kind in ("sd", "latent-diffusion-adapter"):
        from cosalkit.backend.sd import StableDiffusionBackend

        return StableDiffusionBackend(model_id or "CompVis/stable-diffusion-v1-4", **kwargs)
    raise ConfigurationError(f"unknown backend kind {kind!r}")


def backend_for(descriptor: BackendDescriptor) -> Backend:
    """Rebuild the backend a concept was learned with."""
    if descriptor.kind == "toy":
        prefix = "toy-seed"
        if not descriptor.model_id.startswith(prefix):
            raise ConfigurationError(f"unrecognised toy model id {descriptor.model_id!r}")
        backend = ToyBackend(seed=int(descriptor.model_id[len(prefix):]))
    else:
        backend = make_backend("sd", descriptor.model_id)
    if backend.descriptor.to_dict() != descriptor.to_dict():
        raise ConfigurationError(f"backend {backend.descriptor} does not match {descriptor}")
    return backend


__all__ = [
    "PLACEHOLDER", "Backend", "BackendDescriptor", "NoiseSchedule", "NoisyLatent",
    "TextEmbeddingSequence", "ToyBackend", "backend_for", "make_backend", "q_sample",
]
