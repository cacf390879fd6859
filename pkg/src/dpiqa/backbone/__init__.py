"""Denoiser backbones, noise schedule, image adapter and single-pass feature extraction."""
from __future__ import annotations

from typing import Optional, Protocol

import torch

from .adapter import ImageAdapter, image_adapter_forward
from .mini import MiniBackbone, MiniUNet
from .schedule import NoiseSchedule, add_noise, noised_latent
from .taps import FeatureTapSet

__all__ = [
    "DenoiserBackbone",
    "FeatureTapSet",
    "ImageAdapter",
    "MiniBackbone",
    "MiniUNet",
    "NoiseSchedule",
    "add_noise",
    "extract_features",
    "image_adapter_forward",
    "noised_latent",
]


class DenoiserBackbone(Protocol):
    cond_width: int
    latent_factor: int
    calls: int

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def denoise_with_taps(self, z, t: int, cond, down_residuals=None) -> FeatureTapSet: ...

    def tap_shapes(self, image_size: int) -> dict[str, list[tuple[int, int, int]]]: ...


def extract_features(
    backbone: DenoiserBackbone,
    schedule: NoiseSchedule,
    x: torch.Tensor,
    t: int,
    cond: torch.Tensor,
    adapter: Optional[ImageAdapter] = None,
    eps_policy: str = "zero",
    generator: Optional[torch.Generator] = None,
) -> FeatureTapSet:
    """One conditioned denoiser pass at timestep ``t``; returns the stage taps.

    ``eps_policy`` is ``"zero"`` (deterministic, used at inference) or
    ``"sample"`` (fresh standard-normal noise, used in training). Image-adapter
    outputs are added onto the down taps inside the pass.
    """
    if cond.shape[-1] != backbone.cond_width:
        raise ValueError(f"condition width {cond.shape[-1]} does not match backbone width {backbone.cond_width}")
    z0 = backbone.encode(x)
    if eps_policy == "zero":
        eps = torch.zeros_like(z0)
    elif eps_policy == "sample":
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    else:
        raise ValueError(f"unknown noise policy {eps_policy!r}")
    zt = add_noise(schedule, z0, t, eps)
    residuals = adapter(x) if adapter is not None else None
    taps = backbone.denoise_with_taps(zt, t, cond, residuals)
    for kind, maps in (("down", taps.down), ("up", taps.up)):
        for i, f in enumerate(maps):
            if not torch.isfinite(f).all():
                raise FloatingPointError(f"non-finite activations in {kind} stage {i + 1}")
    return taps
