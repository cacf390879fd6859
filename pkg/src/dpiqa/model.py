"""The teacher bundle: condition, adapters, denoiser backbone, decoder and head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import torch
from torch import nn

from .backbone import ImageAdapter, MiniBackbone, NoiseSchedule, extract_features
from .backbone.taps import FeatureTapSet
from .conditioning import (
    CLIPTextEncoder,
    HashTextEncoder,
    PromptTemplate,
    TextAdapter,
    build_condition,
    load_template,
)
from .dataset import IMAGE_SIZE, load_image, preprocess_image
from .decoder import QualityFeatureDecoder, RegressionHead, regress_score


@dataclass
class ModelConfig:
    backbone: str = "mini"
    weights_path: Optional[str] = None
    cond_width: int = 768
    timestep: int = 1
    schedule_steps: int = 1000
    unet_channels: tuple[int, ...] = (32, 64, 64, 64)
    latent_channels: int = 4
    attention_heads: int = 4
    adapter_widths: Optional[tuple[int, ...]] = None
    zero_init_adapters: bool = True
    text_adapter_hidden: Optional[int] = None
    qfd_channels: int = 512
    qfd_reduce: tuple[int, ...] = (512, 128, 32, 8)
    qfd_levels: tuple[bool, ...] = (True, True, True, True)
    se_reduction: int = 16
    head_hidden: tuple[int, ...] = (1024, 128)
    image_size: int = IMAGE_SIZE
    encoder: str = "hash"
    encoder_seed: int = 0
    init_seed: int = 0
    template: Optional[PromptTemplate] = field(default=None)

    def resolved_template(self) -> PromptTemplate:
        return self.template if self.template is not None else load_template()

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["template"] = self.resolved_template().to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in names}
        for k, v in kwargs.items():
            if isinstance(v, list):
                kwargs[k] = tuple(v)
        if isinstance(kwargs.get("template"), dict):
            kwargs["template"] = PromptTemplate.from_dict(kwargs["template"])
        return cls(**kwargs)


def make_text_encoder(cfg: ModelConfig):
    if cfg.encoder == "hash":
        return HashTextEncoder(cfg.cond_width, cfg.encoder_seed)
    if cfg.encoder == "clip":
        if not cfg.weights_path:
            raise ValueError("the clip text encoder needs weights_path")
        return CLIPTextEncoder(cfg.weights_path)
    raise ValueError(f"unknown text encoder {cfg.encoder!r}")


def make_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "mini":
        return MiniBackbone(cfg.cond_width, cfg.unet_channels, cfg.latent_channels, cfg.attention_heads)
    if cfg.backbone == "pretrained":
        from .backbone.pretrained import PretrainedBackbone

        if not cfg.weights_path:
            raise ValueError("the pretrained backbone needs weights_path")
        return PretrainedBackbone.from_pretrained(cfg.weights_path)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


class TeacherModel(nn.Module):
    """Image -> (score, 64x64x8 quality map) through one denoiser pass."""

    kind = "teacher"

    def __init__(
        self,
        cfg: ModelConfig,
        condition: Optional[torch.Tensor] = None,
        backbone: Optional[nn.Module] = None,
    ):
        super().__init__()
        self.cfg = cfg
        if condition is None:
            condition = build_condition(make_text_encoder(cfg), cfg.resolved_template())
        if condition.shape[-1] != cfg.cond_width:
            raise ValueError(f"condition width {condition.shape[-1]} does not match cond_width {cfg.cond_width}")
        self.register_buffer("base_condition", condition.detach().clone())
        self.schedule = NoiseSchedule.scaled_linear(cfg.schedule_steps)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.backbone = backbone if backbone is not None else make_backbone(cfg)
            if self.backbone.cond_width != cfg.cond_width:
                raise ValueError(f"backbone attends over width {self.backbone.cond_width}, config says {cfg.cond_width}")
            shapes = self.backbone.tap_shapes(cfg.image_size)
            self.text_adapter = TextAdapter(cfg.cond_width, cfg.text_adapter_hidden, zero_init=cfg.zero_init_adapters)
            self.image_adapter = ImageAdapter(
                shapes["down"], cfg.image_size, self.backbone.latent_factor, cfg.adapter_widths, cfg.zero_init_adapters
            )
            self.qfd = QualityFeatureDecoder(
                [c for c, _, _ in shapes["up"]], cfg.qfd_channels, cfg.qfd_reduce, cfg.se_reduction, cfg.qfd_levels
            )
            self.head = RegressionHead(hidden=cfg.head_hidden)

    def condition(self) -> torch.Tensor:
        return self.text_adapter(self.base_condition)

    def features(self, x, eps_policy: str = "zero", generator=None, use_adapter: bool = True) -> FeatureTapSet:
        return extract_features(
            self.backbone,
            self.schedule,
            x,
            self.cfg.timestep,
            self.condition(),
            self.image_adapter if use_adapter else None,
            eps_policy,
            generator,
        )

    def forward(self, x, eps_policy: str = "zero", generator=None) -> tuple[torch.Tensor, torch.Tensor]:
        taps = self.features(x, eps_policy, generator)
        fq = self.qfd(taps.up)
        return regress_score(self.head, fq), fq

    def set_trainable(self, scope: str = "full"):
        """``full`` tunes everything but the latent encoder; ``adapters`` freezes the U-Net."""
        if scope not in ("full", "adapters"):
            raise ValueError(f"unknown trainable scope {scope!r}")
        self.requires_grad_(True)
        encoder = getattr(self.backbone, "encoder", None) or getattr(self.backbone, "vae", None)
        if encoder is not None:
            encoder.requires_grad_(False)
        if scope == "adapters":
            for p in self.backbone.unet_parameters():
                p.requires_grad_(False)
        return self


def as_batch(images: Sequence, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Stack paths, PIL images, arrays or preprocessed tensors into a batch."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    out = []
    for im in images:
        if isinstance(im, torch.Tensor):
            out.append(im)
        elif isinstance(im, (str, bytes)) or hasattr(im, "__fspath__"):
            out.append(load_image(im, size))
        else:
            out.append(preprocess_image(im, size))
    return torch.stack(out)


@torch.no_grad()
def predict(model: nn.Module, images, batch_size: int = 8) -> list[float]:
    """Deterministic scores for a batch of images (zero noise, eval mode)."""
    was_training = model.training
    model.eval()
    try:
        x = as_batch(images, model.cfg.image_size)
        scores = []
        for i in range(0, len(x), batch_size):
            chunk = x[i : i + batch_size].to(next(model.parameters()).dtype)
            y, _ = model(chunk)
            scores.extend(float(v) for v in y)
        return scores
    finally:
        model.train(was_training)
