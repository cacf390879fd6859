"""Split-protocol evaluation, cross-dataset testing and saliency maps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset, Subset

from .dataset import SplitPlan
from .metrics import median, plcc, srcc
from .training import predict_dataset


@dataclass
class SplitResult:
    seed: int
    repeat_index: int
    plcc: float
    srcc: float
    n_test: int
    checkpoint_hash: Optional[str] = None


@dataclass
class EvalReport:
    dataset_id: str
    checkpoint_hash: str
    mode: str = "splits"
    splits: list[SplitResult] = field(default_factory=list)
    median_plcc: float = float("nan")
    median_srcc: float = float("nan")
    source_dataset_id: Optional[str] = None

    @classmethod
    def from_splits(cls, dataset_id: str, checkpoint_hash: str, splits: Sequence[SplitResult], **kw) -> "EvalReport":
        if not splits:
            raise ValueError("no split results to aggregate")
        return cls(
            dataset_id=dataset_id,
            checkpoint_hash=checkpoint_hash,
            splits=list(splits),
            median_plcc=median([s.plcc for s in splits]),
            median_srcc=median([s.srcc for s in splits]),
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path: str | Path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["splits"] = [SplitResult(**s) for s in d.get("splits", [])]
        return cls(**d)

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_predictions(ys: Sequence[float], preds: Sequence[float]) -> tuple[float, float]:
    return plcc(ys, preds), srcc(ys, preds)


def evaluate_split(model, split: SplitPlan, dataset: Dataset) -> tuple[float, float]:
    """Metrics of ``model`` on the split's test partition (normalized MOS vs prediction)."""
    if not split.test_refs:
        raise ValueError("split has an empty test set")
    ys, preds = predict_dataset(model, Subset(dataset, list(split.test_refs)))
    return evaluate_predictions(ys, preds)


def evaluate_protocol(
    model_for_split: Callable[[SplitPlan], torch.nn.Module],
    splits: Sequence[SplitPlan],
    dataset: Dataset,
    dataset_id: str,
    checkpoint_hash: str,
) -> EvalReport:
    results = []
    for split in splits:
        p, s = evaluate_split(model_for_split(split), split, dataset)
        results.append(SplitResult(split.seed, split.repeat_index, p, s, len(split.test_refs)))
    return EvalReport.from_splits(dataset_id, checkpoint_hash, results)


def cross_dataset_eval(model, source_id: str, target: Dataset, target_id: str) -> tuple[float, float]:
    """Zero-shot metrics on every image of an unseen dataset; nothing is fitted on it."""
    if source_id == target_id:
        raise ValueError(f"cross-dataset evaluation needs distinct datasets, got {source_id!r} twice")
    ys, preds = predict_dataset(model, target)
    return evaluate_predictions(ys, preds)


def saliency_map(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    """|d score / d pixel|, max over colour channels, min-max scaled to [0, 1].

    ``x`` is one preprocessed image ``(3, H, W)``; returns ``(H, W)``. A
    gradient that is zero everywhere gives an all-zero map.
    """
    was_training = model.training
    model.eval()
    try:
        x = x.detach().clone().unsqueeze(0).requires_grad_(True)
        score = model(x)[0].sum()
        if not score.requires_grad:
            raise RuntimeError("model output is not differentiable with respect to its input")
        (grad,) = torch.autograd.grad(score, x, allow_unused=True)
    finally:
        model.train(was_training)
    if grad is None:
        return torch.zeros(x.shape[-2:])
    g = grad[0].abs().amax(dim=0)
    lo, hi = g.min(), g.max()
    if hi > lo:
        return (g - lo) / (hi - lo)
    return torch.ones_like(g) if hi > 0 else torch.zeros_like(g)


def save_saliency_png(sal: torch.Tensor, path: str | Path):
    arr = np.round(sal.detach().cpu().numpy() * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
