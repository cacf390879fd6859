from __future__ import annotations

from typing import Optional, Sequence

import torch.nn.functional as F
from torch import nn


class _Residual(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


class ImageAdapter(nn.Module):
    """Convolutional pyramid over the raw image, one output per down tap.

    A stride-``latent_factor`` stem brings the image to latent resolution;
    each later stage halves it with a strided convolution. Every stage has two
    residual blocks and a 1x1 projection onto the tap's channel count. The
    projections start at zero so an untrained adapter leaves the taps alone.
    """

    def __init__(
        self,
        tap_shapes: Sequence[tuple[int, int, int]],
        image_size: int = 512,
        latent_factor: int = 8,
        widths: Optional[Sequence[int]] = None,
        zero_init: bool = True,
    ):
        super().__init__()
        if len(tap_shapes) != 4:
            raise ValueError(f"expected 4 down-tap shapes, got {len(tap_shapes)}")
        for i, (_, h, w) in enumerate(tap_shapes):
            size = image_size // latent_factor >> i
            if (h, w) != (size, size):
                raise ValueError(f"down tap {i} is {h}x{w} but the adapter produces {size}x{size}")
        self.tap_shapes = [tuple(s) for s in tap_shapes]
        widths = list(widths or [c for c, _, _ in tap_shapes])
        self.stem = nn.Conv2d(3, widths[0], kernel_size=latent_factor, stride=latent_factor)
        self.stages = nn.ModuleList()
        self.proj = nn.ModuleList()
        prev = widths[0]
        for i, (ch, _, _) in enumerate(tap_shapes):
            down = nn.Identity() if i == 0 else nn.Conv2d(prev, widths[i], 3, stride=2, padding=1)
            self.stages.append(nn.Sequential(down, _Residual(widths[i]), _Residual(widths[i])))
            proj = nn.Conv2d(widths[i], ch, 1)
            if zero_init:
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
            self.proj.append(proj)
            prev = widths[i]

    def forward(self, x):
        h = self.stem(x)
        outs = []
        for stage, proj in zip(self.stages, self.proj):
            h = stage(h)
            outs.append(proj(h))
        return outs


def image_adapter_forward(adapter: ImageAdapter, x):
    return adapter(x)
