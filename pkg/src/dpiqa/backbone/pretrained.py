"""Full-scale backbone: a pretrained latent-diffusion VAE encoder and U-Net.

Requires the optional ``diffusers`` dependency. Taps are captured with
forward hooks at the same points as the mini backbone: each stage's output
before its resampler. Adapter features go through diffusers' intra-block
residual path, which adds them to each down stage before its skip is stored.
"""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .taps import FeatureTapSet

SD_LATENT_SCALE = 0.18215


class PretrainedBackbone(nn.Module):
    latent_factor = 8

    def __init__(self, unet, vae=None, latent_scale: float = SD_LATENT_SCALE):
        super().__init__()
        if len(unet.down_blocks) != 4 or len(unet.up_blocks) != 4:
            raise ValueError("expected a U-Net with four down and four up blocks")
        self.unet = unet
        self.vae = vae
        if vae is not None:
            vae.requires_grad_(False)
            self.latent_factor = 2 ** (len(vae.config.block_out_channels) - 1)
        self.latent_scale = latent_scale
        self.cond_width = unet.config.cross_attention_dim
        self.calls = 0

    @classmethod
    def from_pretrained(cls, path: str, dtype: torch.dtype = torch.float32):
        from diffusers import AutoencoderKL, UNet2DConditionModel

        unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet", torch_dtype=dtype)
        vae = AutoencoderKL.from_pretrained(path, subfolder="vae", torch_dtype=dtype)
        return cls(unet, vae)

    def tap_shapes(self, image_size: int) -> dict[str, list[tuple[int, int, int]]]:
        latent = image_size // self.latent_factor
        channels = list(self.unet.config.block_out_channels)
        down = [(c, latent >> i, latent >> i) for i, c in enumerate(channels)]
        up = [(c, latent >> (3 - i), latent >> (3 - i)) for i, c in enumerate(reversed(channels))]
        return {"down": down, "up": up}

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if self.vae is None:
            raise RuntimeError("no latent encoder attached to this backbone")
        return self.vae.encode(x).latent_dist.mean * self.latent_scale

    def unet_parameters(self):
        return self.unet.parameters()

    def denoise_with_taps(self, z, t: int, cond, down_residuals=None) -> FeatureTapSet:
        self.calls += 1
        down: list[Optional[torch.Tensor]] = [None] * 4
        up: list[Optional[torch.Tensor]] = [None] * 4
        handles = []

        def grab(store, i):
            def pre_hook(_module, args):
                store[i] = args[0]
            return pre_hook

        def grab_output(store, i):
            def hook(_module, _args, output):
                out = output[0] if isinstance(output, tuple) else output
                # diffusers may update this tensor in place after the hook fires
                store[i] = out.clone()
            return hook

        try:
            for store, blocks, attr in ((down, self.unet.down_blocks, "downsamplers"), (up, self.unet.up_blocks, "upsamplers")):
                for i, block in enumerate(blocks):
                    resamplers = getattr(block, attr, None)
                    if resamplers:
                        handles.append(resamplers[0].register_forward_pre_hook(grab(store, i)))
                    else:
                        handles.append(block.register_forward_hook(grab_output(store, i)))
            if cond.dim() == 2:
                cond = cond.unsqueeze(0).expand(z.shape[0], -1, -1)
            kwargs = {}
            if down_residuals is not None:
                kwargs["down_intrablock_additional_residuals"] = list(down_residuals)
            self.unet(z, t, encoder_hidden_states=cond, **kwargs)
        finally:
            for h in handles:
                h.remove()

        # blocks without cross-attention receive the adapter residual after the block returns
        last = self.unet.down_blocks[3]
        if down_residuals is not None and not getattr(last, "has_cross_attention", False):
            down[3] = down[3] + down_residuals[3]
        return FeatureTapSet(down=list(down), up=list(up))
