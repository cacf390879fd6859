"""Teacher training loop: Adam, multi-step decay, periodic validation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch.utils.data import DataLoader, Dataset, Subset

from .losses import margin_loss, mse_loss
from .metrics import plcc, srcc

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class TrainSchedule:
    lr: float = 1e-5
    batch_size: int = 12
    max_epochs: int = 15
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.2
    val_step: int = 250
    val_fraction: float = 0.1
    max_steps: Optional[int] = None
    trainable: str = "full"

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for the margin loss")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing: {self.decay_epochs}")
        if self.lr <= 0 or self.max_epochs < 1 or self.val_step < 1:
            raise ValueError("lr, max_epochs and val_step must be positive")

    def lr_at_epoch(self, epoch: int) -> float:
        """Learning rate in effect once ``epoch`` epochs have completed."""
        return self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log_records: list):
        super().__init__(message)
        self.log = log_records


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_srcc: float = -math.inf
    best_step: int = 0
    steps: int = 0


def make_adam(params, lr: float) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    try:
        return torch.optim.Adam(params, lr=lr, fused=True)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(params, lr=lr)


def snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@torch.no_grad()
def predict_dataset(model, dataset: Dataset, batch_size: int = 8) -> tuple[list[float], list[float]]:
    was_training = model.training
    model.eval()
    ys, preds = [], []
    try:
        for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            out = model(x)[0]
            preds.extend(float(v) for v in out)
            ys.extend(float(v) for v in y)
    finally:
        model.train(was_training)
    return ys, preds


def safe_metrics(ys, preds) -> tuple[float, float]:
    try:
        return plcc(ys, preds), srcc(ys, preds)
    except ValueError:
        return float("nan"), float("nan")


def holdout(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a seeded validation slice off ``dataset``; tiny sets validate on themselves."""
    n = len(dataset)
    n_val = int(n * fraction)
    if n_val < 2 or n - n_val < 2:
        return dataset, dataset
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    return Subset(dataset, perm[n_val:]), Subset(dataset, perm[:n_val])


def fit(
    model: torch.nn.Module,
    train_set: Dataset,
    schedule: TrainSchedule,
    step_loss: Callable[[torch.Tensor, torch.Tensor, torch.Generator], tuple[torch.Tensor, dict]],
    val_set: Optional[Dataset] = None,
    seed: int = 0,
    params: Optional[Sequence[torch.nn.Parameter]] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Shared minibatch loop for teacher and student.

    ``step_loss(x, y, noise_generator)`` returns the loss to minimise and a
    dict of scalars to log. The state with the best validation SRCC is
    loaded back into ``model`` before returning.
    """
    if len(train_set) < 2:
        raise ValueError("training split needs at least two samples")
    if val_set is None:
        train_set, val_set = holdout(train_set, schedule.val_fraction, seed)

    torch.manual_seed(seed)
    loader_gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed + 1)
    loader = DataLoader(
        train_set,
        batch_size=schedule.batch_size,
        shuffle=True,
        generator=loader_gen,
        drop_last=len(train_set) > schedule.batch_size,
    )
    optimizer = make_adam(params if params is not None else model.parameters(), schedule.lr)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, list(schedule.decay_epochs), schedule.decay_factor)

    result = TrainResult()
    best_state = snapshot(model)

    def emit(record):
        result.log.append(record)
        if on_record is not None:
            on_record(record)

    def validate(step, epoch):
        ys, preds = predict_dataset(model, val_set)
        p, s = safe_metrics(ys, preds)
        emit({"step": step, "epoch": epoch, "val_plcc": p, "val_srcc": s})
        if not math.isnan(s) and s >= result.best_srcc:  # ties go to the later state
            result.best_srcc, result.best_step = s, step
            best_state.update(snapshot(model))

    model.train()
    step = 0
    done = False
    for epoch in range(schedule.max_epochs):
        for x, y in loader:
            loss, parts = step_loss(x, y, noise_gen)
            if not torch.isfinite(loss):
                model.load_state_dict(best_state)
                raise TrainingDiverged(f"non-finite loss at step {step + 1}", result.log)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            emit({"step": step, "epoch": epoch, "lr": optimizer.param_groups[0]["lr"], "loss": loss.item(), **parts})
            if step % schedule.val_step == 0:
                validate(step, epoch)
            if schedule.max_steps is not None and step >= schedule.max_steps:
                done = True
                break
        scheduler.step()
        if done:
            break
    if step % schedule.val_step:
        validate(step, epoch)
    result.steps = step
    model.load_state_dict(best_state)
    return result


def train_teacher(
    model,
    train_set: Dataset,
    schedule: TrainSchedule,
    loss_cfg: LossConfig = LossConfig(),
    val_set: Optional[Dataset] = None,
    seed: int = 0,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Minimise MSE + margin loss end to end; noise is resampled per example."""
    model.set_trainable(schedule.trainable)

    def step_loss(x, y, gen):
        yp, _ = model(x, eps_policy="sample", generator=gen)
        mse = mse_loss(y, yp)
        mgn = margin_loss(y, yp, loss_cfg.lam)
        return mse + mgn, {"mse": mse.item(), "margin": mgn.item()}

    result = fit(model, train_set, schedule, step_loss, val_set, seed, on_record=on_record)
    log.info("teacher trained for %d steps, best val SRCC %.4f at step %d", result.steps, result.best_srcc, result.best_step)
    return result
