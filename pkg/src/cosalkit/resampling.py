"""Piecewise-uniform timestep distribution that oversamples a middle interval.

The diffusion range ``[0, T)`` is split into a head, a middle and a tail
interval. The middle interval receives total mass ``alpha / (1 + alpha)``;
head and tail share the rest equally. ``alpha = 1`` with intervals of
sizes (T/4, T/2, T/4) reproduces uniform sampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cosalkit.errors import ValidationError


@dataclass(frozen=True)
class ResamplingConfig:
    t1: tuple = (0, 300)
    t2: tuple = (300, 800)
    t3: tuple = (800, 1000)
    alpha: float = 1.5

    def __post_init__(self):
        for name in ("t1", "t2", "t3"):
            lo, hi = getattr(self, name)
            if int(lo) != lo or int(hi) != hi or hi <= lo:
                raise ValidationError(f"{name}={getattr(self, name)} is not a nonempty integer interval")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.t1[0] != 0 or self.t1[1] != self.t2[0] or self.t2[1] != self.t3[0]:
            raise ValidationError("intervals must be contiguous and start at 0")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValidationError(f"alpha must be positive, got {self.alpha}")

    @property
    def total_steps(self) -> int:
        return self.t3[1]

    @property
    def sizes(self) -> tuple:
        return tuple(hi - lo for lo, hi in (self.t1, self.t2, self.t3))

    def interval_masses(self) -> np.ndarray:
        a = self.alpha
        return np.array([0.5 / (1 + a), a / (1 + a), 0.5 / (1 + a)])

    def to_dict(self) -> dict:
        return {"t1": list(self.t1), "t2": list(self.t2), "t3": list(self.t3), "alpha": self.alpha}

    @classmethod
    def from_dict(cls, data: dict) -> "ResamplingConfig":
        return cls(tuple(data["t1"]), tuple(data["t2"]), tuple(data["t3"]), float(data["alpha"]))


def resampling_pmf(t, cfg: ResamplingConfig) -> float:
    """Probability of drawing integer timestep ``t``."""
    if int(t) != t or not 0 <= t < cfg.total_steps:
        raise ValidationError(f"timestep {t!r} outside [0, {cfg.total_steps})")
    n1, n2, n3 = cfg.sizes
    a = cfg.alpha
    if t < cfg.t1[1]:
        return 1.0 / (2 * n1 * (1 + a))
    if t < cfg.t2[1]:
        return a / (n2 * (1 + a))
    return 1.0 / (2 * n3 * (1 + a))


def pmf_table(cfg: ResamplingConfig) -> np.ndarray:
    return np.array([resampling_pmf(t, cfg) for t in range(cfg.total_steps)])


def sample_timestep(cfg: ResamplingConfig | None, rng: np.random.Generator,
                    total_steps: int = 1000) -> int:
    """Draw one timestep; ``cfg=None`` means uniform over ``[0, total_steps)``."""
    if cfg is None:
        return int(rng.integers(0, total_steps))
    # pick the interval, then a uniform step inside it
    k = int(rng.choice(3, p=cfg.interval_masses()))
    lo, hi = (cfg.t1, cfg.t2, cfg.t3)[k]
    return int(rng.integers(lo, hi))
