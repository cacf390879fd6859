"""Lightweight CNN student distilled from the teacher's quality feature map."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset

from .dataset import IMAGE_SIZE
from .decoder import MAP_CHANNELS, MAP_SIZE
from .losses import distill_loss, margin_loss, mse_loss
from .training import LossConfig, TrainResult, TrainSchedule, fit

log = logging.getLogger(__name__)


@dataclass
class StudentConfig:
    backbone: str = "small"  # "small" or "efficientnet_b0" ... "efficientnet_b7"
    pretrained: bool = False
    widths: tuple[int, ...] = (16, 32, 48, 64)
    head_hidden: int = 128
    image_size: int = IMAGE_SIZE
    init_seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
        return cls(**kwargs)


class SmallCNN(nn.Module):
    """Strided stem (x4), one halving stage, then full-resolution stages; stride 8."""

    def __init__(self, widths=(16, 32, 48, 64)):
        super().__init__()
        layers = [nn.Conv2d(3, widths[0], 4, stride=4), nn.SiLU()]
        prev = widths[0]
        for i, w in enumerate(widths[1:]):
            stride = 2 if i == 0 else 1
            layers += [nn.Conv2d(prev, w, 3, stride=stride, padding=1), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1), nn.SiLU()]
            prev = w
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.body(x)


def _efficientnet(name: str, pretrained: bool) -> nn.Module:
    import torchvision

    builder = getattr(torchvision.models, name)
    weights = "DEFAULT" if pretrained else None
    features = builder(weights=weights).features
    features.out_channels = features[-1][0].out_channels
    return features


class StudentModel(nn.Module):
    """CNN backbone, a head aligned to the teacher's 64x64x8 map, and a score head.

    The score is regressed from the aligned map itself (average-pooled to 8x8).
    """

    kind = "student"

    def __init__(self, cfg: StudentConfig = StudentConfig()):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            if cfg.backbone == "small":
                self.backbone = SmallCNN(cfg.widths)
            elif cfg.backbone.startswith("efficientnet_"):
                self.backbone = _efficientnet(cfg.backbone, cfg.pretrained)
            else:
                raise ValueError(f"unknown student backbone {cfg.backbone!r}")
            self.align = nn.Conv2d(self.backbone.out_channels, MAP_CHANNELS, 1)
            self.score_head = nn.Sequential(
                nn.Flatten(), nn.Linear(MAP_CHANNELS * 64, cfg.head_hidden), nn.GELU(), nn.Linear(cfg.head_hidden, 1)
            )

    def forward(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.backbone(x)
        h = F.interpolate(h, size=(MAP_SIZE, MAP_SIZE), mode="bilinear", align_corners=False)
        fs = self.align(h)
        score = self.score_head(F.adaptive_avg_pool2d(fs, 8)).squeeze(-1)
        return score, fs


def student_forward(student: StudentModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    score, fs = student(x)
    if not (torch.isfinite(fs).all() and torch.isfinite(score).all()):
        raise FloatingPointError("student produced non-finite outputs")
    return fs, score


def tensor_digest(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().contiguous().cpu().numpy().tobytes()).hexdigest()[:32]


class TeacherMapCache:
    """Teacher quality maps keyed by (checkpoint hash, image hash).

    Held in memory; also persisted under ``root`` when one is given.
    """

    def __init__(self, teacher, checkpoint_hash: str = "unsaved", root: Optional[str | Path] = None):
        self.teacher = teacher
        self.checkpoint_hash = checkpoint_hash
        self.root = Path(root) / checkpoint_hash if root is not None else None
        self._mem: dict[str, torch.Tensor] = {}
        self.misses = 0

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        keys = [tensor_digest(xi) for xi in x]
        missing = [i for i, k in enumerate(keys) if k not in self._mem and not self._load(k)]
        if missing:
            self.misses += len(missing)
            _, fq = self.teacher(x[missing])
            for i, f in zip(missing, fq):
                self._mem[keys[i]] = f.clone()
                if self.root is not None:
                    self.root.mkdir(parents=True, exist_ok=True)
                    torch.save(f.clone(), self.root / f"{keys[i]}.pt")
        return torch.stack([self._mem[k] for k in keys])

    def _load(self, key: str) -> bool:
        if self.root is None:
            return False
        path = self.root / f"{key}.pt"
        if not path.is_file():
            return False
        self._mem[key] = torch.load(path, weights_only=True)
        return True


def freeze_teacher(teacher: nn.Module) -> nn.Module:
    teacher.eval()
    teacher.requires_grad_(False)
    return teacher


def train_student(
    student: StudentModel,
    teacher: Optional[nn.Module],
    train_set: Dataset,
    schedule: TrainSchedule,
    loss_cfg: LossConfig = LossConfig(),
    distill_weight: float = 1.0,
    val_set: Optional[Dataset] = None,
    seed: int = 0,
    cache: Optional[TeacherMapCache] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit the student to the frozen teacher's maps plus the ground-truth scores.

    ``distill_weight=0`` drops the map term (training from labels only).
    """
    if teacher is None:
        raise ValueError("a trained teacher is required for distillation")
    freeze_teacher(teacher)
    targets = cache if cache is not None else TeacherMapCache(teacher)

    def step_loss(x, y, _gen):
        ys, fs = student(x)
        ft = targets(x)
        ld = distill_loss(ft, fs)
        mse = mse_loss(y, ys)
        mgn = margin_loss(y, ys, loss_cfg.lam)
        loss = distill_weight * ld + mse + mgn
        return loss, {"distill": ld.item(), "mse": mse.item(), "margin": mgn.item()}

    result = fit(student, train_set, schedule, step_loss, val_set, seed, params=student.parameters(), on_record=on_record)
    log.info("student trained for %d steps, best val SRCC %.4f", result.steps, result.best_srcc)
    return result


@torch.no_grad()
def mean_distill_loss(student: nn.Module, teacher_maps: Callable[[torch.Tensor], torch.Tensor], dataset: Dataset, batch_size: int = 8) -> float:
    was_training = student.training
    student.eval()
    total, n = 0.0, 0
    try:
        for x, _ in torch.utils.data.DataLoader(dataset, batch_size=batch_size):
            _, fs = student(x)
            total += distill_loss(teacher_maps(x), fs).item() * len(x)
            n += len(x)
    finally:
        student.train(was_training)
    return total / n


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
