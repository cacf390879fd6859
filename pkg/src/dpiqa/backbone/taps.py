from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class FeatureTapSet:
    """Four down-stage and four up-stage maps from one denoiser pass, NCHW."""

    down: list[torch.Tensor]
    up: list[torch.Tensor]

    def __post_init__(self):
        if len(self.down) != 4 or len(self.up) != 4:
            raise ValueError(f"expected 4 down and 4 up taps, got {len(self.down)} and {len(self.up)}")

    def all(self) -> list[torch.Tensor]:
        return [*self.down, *self.up]

    def shapes(self) -> dict[str, list[tuple[int, int, int]]]:
        return {
            "down": [tuple(f.shape[1:]) for f in self.down],
            "up": [tuple(f.shape[1:]) for f in self.up],
        }

    def equal(self, other: "FeatureTapSet") -> bool:
        return all(torch.equal(a, b) for a, b in zip(self.all(), other.all()))
