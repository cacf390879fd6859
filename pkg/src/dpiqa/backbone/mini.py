"""A small randomly initialised conditional U-Net with stage taps.

Four resolution stages down, four up, cross-attention over the condition
rows in every stage. Used for tests and desk-scale runs in place of the
pretrained latent-diffusion denoiser.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .taps import FeatureTapSet

LATENT_FACTOR = 8


def _groups(channels: int) -> int:
    # at least two channels per group so 1x1 maps still normalise at batch size 1
    return 8 if channels % 8 == 0 and channels >= 16 else 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class LatentEncoder(nn.Module):
    """Fixed strided convolution standing in for the VAE encoder (factor 8)."""

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(3, latent_channels, kernel_size=LATENT_FACTOR, stride=LATENT_FACTOR)
        self.requires_grad_(False)

    def forward(self, x):
        return self.conv(x)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Image positions attend over the condition rows (keys and values)."""

    def __init__(self, channels: int, cond_width: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            heads = 1
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_width, channels, bias=False)
        self.to_v = nn.Linear(cond_width, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(cond), self.to_v(cond)
        if k.dim() == 2:
            k, v = k.expand(b, -1, -1), v.expand(b, -1, -1)

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, c // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = self.to_out(out.transpose(1, 2).reshape(b, h * w, c))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, cond_width: int, heads: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = CrossAttention(out_ch, cond_width, heads)

    def forward(self, x, temb, cond):
        return self.attn(self.res(x, temb), cond)


class MiniUNet(nn.Module):
    """Conditional U-Net whose eight stage outputs are returned as taps.

    Down stage ``i`` runs at ``latent / 2**i``; up stage ``i`` mirrors down
    stage ``3 - i``. A tap is the stage output before the next resize.
    """

    def __init__(
        self,
        cond_width: int,
        channels: Sequence[int] = (32, 64, 64, 64),
        latent_channels: int = 4,
        heads: int = 4,
    ):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("the mini U-Net has exactly four stages")
        self.channels = tuple(channels)
        self.cond_width = cond_width
        self.latent_channels = latent_channels
        temb_dim = 4 * channels[0]
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(channels[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, channels[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.down.append(Stage(prev, ch, temb_dim, cond_width, heads))
            if i < 3:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid = Stage(prev, prev, temb_dim, cond_width, heads)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in range(4):
            skip_ch = channels[3 - i]
            self.up.append(Stage(prev + skip_ch, skip_ch, temb_dim, cond_width, heads))
            if i < 3:
                self.upsample.append(nn.Conv2d(skip_ch, skip_ch, 3, padding=1))
            prev = skip_ch
        self.conv_out = nn.Sequential(nn.GroupNorm(_groups(prev), prev), nn.SiLU(), nn.Conv2d(prev, latent_channels, 3, padding=1))

    def tap_shapes(self, latent_size: int) -> dict[str, list[tuple[int, int, int]]]:
        if latent_size % 8:
            raise ValueError(f"latent size {latent_size} must be divisible by 8")
        down = [(ch, latent_size >> i, latent_size >> i) for i, ch in enumerate(self.channels)]
        return {"down": down, "up": down[::-1]}

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        down_residuals: Optional[Sequence[torch.Tensor]] = None,
    ) -> tuple[torch.Tensor, FeatureTapSet]:
        temb = self.time_mlp(timestep_embedding(t.to(z.dtype), self.channels[0]))
        h = self.conv_in(z)
        down_taps, up_taps = [], []
        for i, stage in enumerate(self.down):
            h = stage(h, temb, cond)
            if down_residuals is not None:
                h = h + down_residuals[i]
            down_taps.append(h)
            if i < 3:
                h = self.downsample[i](h)
        h = self.mid(h, temb, cond)
        for i, stage in enumerate(self.up):
            h = stage(torch.cat([h, down_taps[3 - i]], dim=1), temb, cond)
            up_taps.append(h)
            if i < 3:
                h = self.upsample[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(h), FeatureTapSet(down=down_taps, up=up_taps)


class MiniBackbone(nn.Module):
    """Latent encoder plus tapped U-Net behind the denoiser-backbone interface."""

    latent_factor = LATENT_FACTOR

    def __init__(self, cond_width: int, channels: Sequence[int] = (32, 64, 64, 64), latent_channels: int = 4, heads: int = 4):
        super().__init__()
        self.encoder = LatentEncoder(latent_channels)
        self.unet = MiniUNet(cond_width, channels, latent_channels, heads)
        self.cond_width = cond_width
        self.calls = 0

    def tap_shapes(self, image_size: int) -> dict[str, list[tuple[int, int, int]]]:
        return self.unet.tap_shapes(image_size // self.latent_factor)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def denoise_with_taps(self, z, t: int, cond, down_residuals=None) -> FeatureTapSet:
        self.calls += 1
        tt = torch.full((z.shape[0],), float(t), dtype=z.dtype, device=z.device)
        _, taps = self.unet(z, tt, cond, down_residuals)
        return taps

    def unet_parameters(self):
        return self.unet.parameters()
