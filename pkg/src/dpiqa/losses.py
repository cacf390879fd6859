"""Score regression and pairwise ranking losses."""
from __future__ import annotations

import torch
import torch.nn.functional as F


def _check_pair(y: torch.Tensor, yp: torch.Tensor):
    if y.shape != yp.shape or y.dim() != 1:
        raise ValueError(f"expected two equal-length vectors, got {tuple(y.shape)} and {tuple(yp.shape)}")
    if y.numel() == 0:
        raise ValueError("empty batch")


def mse_loss(y: torch.Tensor, yp: torch.Tensor) -> torch.Tensor:
    _check_pair(y, yp)
    return ((y - yp) ** 2).mean()


def margin_loss(y: torch.Tensor, yp: torch.Tensor, lam: float = 0.25) -> torch.Tensor:
    """Mean hinge over the n(n-1)/2 unordered pairs with margin ``lam * std(y)``.

    The standard deviation is the population one (divide by n). Tied targets
    keep their pair term, which reduces to the constant margin.
    """
    _check_pair(y, yp)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    n = y.numel()
    if n < 2:
        raise ValueError("margin loss needs at least two samples")
    m = lam * y.std(correction=0)
    dy = y[:, None] - y[None, :]
    dp = yp[:, None] - yp[None, :]
    i, j = torch.triu_indices(n, n, offset=1, device=y.device)
    hinge = F.relu(-torch.sign(dy[i, j]) * dp[i, j] + m)
    return 2.0 * hinge.sum() / (n * (n - 1))


def total_loss(y: torch.Tensor, yp: torch.Tensor, lam: float = 0.25) -> torch.Tensor:
    return mse_loss(y, yp) + margin_loss(y, yp, lam)


def distill_loss(teacher_fq: torch.Tensor, student_fq: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the quality maps."""
    if teacher_fq.shape != student_fq.shape:
        raise ValueError(f"map shapes differ: {tuple(teacher_fq.shape)} vs {tuple(student_fq.shape)}")
    return ((teacher_fq - student_fq) ** 2).mean()
