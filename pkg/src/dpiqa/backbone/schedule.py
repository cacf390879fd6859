from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention coefficients and their running products.

    Timesteps are 1-based: ``alpha_bar(1) == alphas[0]``.
    """

    alphas: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("schedule needs at least one coefficient")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("schedule coefficients must lie in (0, 1]")
        object.__setattr__(self, "alphas", tuple(float(v) for v in a))
        object.__setattr__(self, "_alpha_bars", tuple(float(v) for v in np.cumprod(a)))

    @property
    def alpha_bars(self) -> tuple[float, ...]:
        return self._alpha_bars

    @property
    def t_max(self) -> int:
        return len(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [1, {self.t_max}]")
        return self._alpha_bars[t - 1]

    @classmethod
    def scaled_linear(cls, t_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        """The latent-diffusion default: betas linear in sqrt space."""
        betas = np.linspace(beta_start**0.5, beta_end**0.5, t_max, dtype=np.float64) ** 2
        return cls(tuple(1.0 - betas))

    @classmethod
    def linear(cls, t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(tuple(1.0 - np.linspace(beta_start, beta_end, t_max, dtype=np.float64)))


def noised_latent(z0: torch.Tensor, eps: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar {alpha_bar} outside [0, 1]")
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
    return alpha_bar**0.5 * z0 + (1.0 - alpha_bar) ** 0.5 * eps


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Sample ``z_t`` from ``z_0`` in closed form."""
    return noised_latent(z0, eps, schedule.alpha_bar(t))
