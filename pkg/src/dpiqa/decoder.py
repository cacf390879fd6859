"""Quality feature decoder and score regression head."""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

MAP_SIZE = 64
MAP_CHANNELS = 8
MAP_FEATURES = MAP_SIZE * MAP_SIZE * MAP_CHANNELS  # 32768


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        w = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(F.silu(self.fc1(w))))
        return x * w[:, :, None, None]


class QualityFeatureDecoder(nn.Module):
    """Fuse four up-stage taps into a 64x64x8 quality feature map.

    Each level is bilinearly resized to 64x64, projected to ``unify_channels``
    by a 3x3 convolution and reweighted by squeeze-and-excite. The four levels
    are concatenated and reduced through ``reduce_channels`` (last entry 8).
    ``levels`` masks taps out of the fusion by zeroing them.
    """

    def __init__(
        self,
        in_channels: Sequence[int],
        unify_channels: int = 512,
        reduce_channels: Sequence[int] = (512, 128, 32, 8),
        se_reduction: int = 16,
        levels: Sequence[bool] = (True, True, True, True),
    ):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError(f"the decoder fuses exactly 4 taps, got {len(in_channels)}")
        if reduce_channels[-1] != MAP_CHANNELS:
            raise ValueError(f"the last reduction stage must emit {MAP_CHANNELS} channels")
        self.in_channels = tuple(in_channels)
        self.levels = tuple(bool(v) for v in levels)
        self.unify = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, unify_channels, 3, padding=1), nn.SiLU(), SqueezeExcite(unify_channels, se_reduction))
            for c in in_channels
        )
        layers: list[nn.Module] = []
        prev = 4 * unify_channels
        for i, c in enumerate(reduce_channels):
            layers.append(nn.Conv2d(prev, c, 3, padding=1))
            if i < len(reduce_channels) - 1:
                layers.append(nn.SiLU())
            prev = c
        self.reduce = nn.Sequential(*layers)
        self.concat_channels: Optional[int] = None

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(taps) != 4:
            raise ValueError(f"expected 4 up taps, got {len(taps)}")
        fused = []
        for i, (f, block) in enumerate(zip(taps, self.unify)):
            if f.dim() != 4 or f.shape[1] != self.in_channels[i]:
                raise ValueError(f"tap {i} has shape {tuple(f.shape)}, expected {self.in_channels[i]} channels")
            if not self.levels[i]:
                f = torch.zeros_like(f)
            if f.shape[-2:] != (MAP_SIZE, MAP_SIZE):
                f = F.interpolate(f, size=(MAP_SIZE, MAP_SIZE), mode="bilinear", align_corners=False)
            fused.append(block(f))
        cat = torch.cat(fused, dim=1)
        self.concat_channels = cat.shape[1]
        return self.reduce(cat)


def qfd_forward(decoder: QualityFeatureDecoder, taps: Sequence[torch.Tensor]) -> torch.Tensor:
    return decoder(taps)


def flatten_map(fq: torch.Tensor) -> torch.Tensor:
    """Flatten (B, 8, 64, 64) maps in (64, 64, 8) row-major order."""
    return fq.permute(0, 2, 3, 1).reshape(fq.shape[0], -1)


class RegressionHead(nn.Module):
    """Three-layer MLP from the flattened quality map to an unbounded score."""

    def __init__(self, in_features: int = MAP_FEATURES, hidden: Sequence[int] = (1024, 128)):
        super().__init__()
        h1, h2 = hidden
        self.in_features = in_features
        self.net = nn.Sequential(nn.Linear(in_features, h1), nn.GELU(), nn.Linear(h1, h2), nn.GELU(), nn.Linear(h2, 1))

    def forward(self, fq: torch.Tensor) -> torch.Tensor:
        flat = flatten_map(fq)
        if flat.shape[1] != self.in_features:
            raise ValueError(f"head expects {self.in_features} inputs, got {flat.shape[1]}")
        return self.net(flat).squeeze(-1)


def regress_score(head: RegressionHead, fq: torch.Tensor) -> torch.Tensor:
    y = head(fq)
    if not torch.isfinite(y).all():
        raise FloatingPointError("regression head produced a non-finite score")
    return y
