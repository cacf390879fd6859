"""Quality prompt template, pooled sentence embeddings and the text adapter."""
from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

PATTERN = "a photo of a {scene} with {distortion} distortion, which is of {quality} quality."


@dataclass(frozen=True)
class PromptTemplate:
    scenes: tuple[str, ...]
    distortions: tuple[str, ...]
    quality_levels: tuple[str, ...]

    def __post_init__(self):
        for name in ("scenes", "distortions", "quality_levels"):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ValueError(f"template list {name!r} is empty")
            if len(set(values)) != len(values):
                raise ValueError(f"template list {name!r} contains duplicates")
        for name in ("scenes", "distortions"):
            if "other" not in getattr(self, name):
                raise ValueError(f"template list {name!r} must contain 'other'")

    @property
    def size(self) -> int:
        return len(self.scenes) * len(self.distortions) * len(self.quality_levels)

    def to_dict(self) -> dict[str, list[str]]:
        return {
            "scenes": list(self.scenes),
            "distortions": list(self.distortions),
            "quality_levels": list(self.quality_levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTemplate":
        return cls(tuple(d["scenes"]), tuple(d["distortions"]), tuple(d["quality_levels"]))


def parse_template(text: str) -> PromptTemplate:
    fields: dict[str, tuple[str, ...]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = tuple(v.strip() for v in value.split(",") if v.strip())
    try:
        return PromptTemplate(fields["scenes"], fields["distortions"], fields["quality_levels"])
    except KeyError as exc:
        raise ValueError(f"template file is missing the {exc.args[0]!r} list") from None


def load_template(path: Optional[str | Path] = None) -> PromptTemplate:
    """Read a template file; ``None`` loads the bundled default lists."""
    if path is None:
        text = resources.files("dpiqa.resources").joinpath("default_template.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_template(text)


def expand_templates(tpl: PromptTemplate) -> list[str]:
    # quality varies fastest, then distortion, then scene
    return [
        PATTERN.format(scene=s, distortion=d, quality=q)
        for s, d, q in itertools.product(tpl.scenes, tpl.distortions, tpl.quality_levels)
    ]


class TextEncoder(Protocol):
    width: int

    def token_embeddings(self, sentence: str) -> torch.Tensor:
        """Per-token embeddings of shape (n_tokens, width), padding excluded."""


class HashTextEncoder:
    """Deterministic stand-in encoder: each token maps to a seeded Gaussian vector."""

    _token_re = re.compile(r"\w+|[^\w\s]")

    def __init__(self, width: int = 768, seed: int = 0):
        self.width = width
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def tokenize(self, sentence: str) -> list[str]:
        return self._token_re.findall(sentence.lower())

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.width).astype(np.float32)
            self._cache[token] = vec
        return vec

    def token_embeddings(self, sentence: str) -> torch.Tensor:
        tokens = self.tokenize(sentence)
        if not tokens:
            return torch.zeros(0, self.width)
        return torch.from_numpy(np.stack([self._vector(t) for t in tokens]))


class CLIPTextEncoder:
    """Token embeddings from a pretrained CLIP text tower (final hidden states)."""

    def __init__(self, path: str, diffusers_layout: bool = True, device: str = "cpu"):
        from transformers import CLIPTextModel, CLIPTokenizer

        self.tokenizer = CLIPTokenizer.from_pretrained(path, subfolder="tokenizer" if diffusers_layout else "")
        self.model = CLIPTextModel.from_pretrained(path, subfolder="text_encoder" if diffusers_layout else "")
        self.model = self.model.to(device).eval()
        self.width = self.model.config.hidden_size
        self.device = device

    @torch.no_grad()
    def token_embeddings(self, sentence: str) -> torch.Tensor:
        enc = self.tokenizer(sentence, padding="max_length", truncation=True,
                             max_length=self.tokenizer.model_max_length, return_tensors="pt")
        hidden = self.model(input_ids=enc.input_ids.to(self.device)).last_hidden_state[0]
        mask = enc.attention_mask[0].bool()
        return hidden[mask.to(hidden.device)].float().cpu()


def embed_sentence(encoder: TextEncoder, sentence: str) -> torch.Tensor:
    tokens = encoder.token_embeddings(sentence)
    if tokens.shape[0] == 0:
        raise ValueError(f"sentence produced no tokens: {sentence!r}")
    return tokens.mean(dim=0)


def build_condition(encoder: TextEncoder, tpl: PromptTemplate) -> torch.Tensor:
    """Stack pooled sentence embeddings into the (K, d) constant condition."""
    rows = []
    for k, sentence in enumerate(expand_templates(tpl)):
        try:
            rows.append(embed_sentence(encoder, sentence))
        except Exception as exc:
            raise ValueError(f"encoder failed on sentence {k}: {exc}") from exc
    cond = torch.stack(rows)
    if not torch.isfinite(cond).all():
        raise ValueError("condition matrix contains non-finite entries")
    return cond


class TextAdapter(nn.Module):
    """Two-layer MLP whose output is added back onto the condition rows."""

    def __init__(self, width: int, hidden: Optional[int] = None, zero_init: bool = True):
        super().__init__()
        self.width = width
        hidden = hidden or width
        self.fc1 = nn.Linear(width, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, width)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def residual(self, base: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(base)))

    def forward(self, base: torch.Tensor) -> torch.Tensor:
        return apply_text_adapter(self, base)


def apply_text_adapter(adapter: TextAdapter, base: torch.Tensor) -> torch.Tensor:
    if base.shape[-1] != adapter.width:
        raise ValueError(f"condition width {base.shape[-1]} does not match adapter width {adapter.width}")
    return base + adapter.residual(base)


def default_template_sizes() -> dict[str, int]:
    tpl = load_template()
    return {"l_s": len(tpl.scenes), "l_d": len(tpl.distortions), "l_q": len(tpl.quality_levels), "K": tpl.size}


def numbered_template(n_scenes: int, n_distortions: int, n_quality: int) -> PromptTemplate:
    """Placeholder lists of the requested lengths (last scene/distortion is 'other')."""
    def names(prefix: str, n: int, other: bool) -> Sequence[str]:
        items = [f"{prefix} {i}" for i in range(n - 1 if other else n)]
        return (*items, "other") if other else tuple(items)

    return PromptTemplate(
        names("scene", n_scenes, True), names("distortion", n_distortions, True), names("level", n_quality, False)
    )
