"""Soft Jaccard coefficient, its loss, and the relative-gain metric.

Sums are accumulated in float64.  The both-empty case is an explicit branch
returning 1; no smoothing epsilon is added anywhere.
"""

from __future__ import annotations

import numpy as np
import torch


def _check(y_star, y_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_star, dtype=np.float64)
    b = np.asarray(y_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite values in segmentation map")
    return a, b


def jaccard_image(y_star, y_hat) -> float:
    """sum(y* . y^) / (sum(y* + y^) - sum(y* . y^)), with J(0, 0) = 1."""
    a, b = _check(y_star, y_hat)
    inter = float(np.sum(a * b))
    union = float(np.sum(a + b)) - inter
    if union == 0.0:
        return 1.0
    return inter / union


def jaccard_loss(y_star, y_hat) -> float:
    return 1.0 - jaccard_image(y_star, y_hat)


def jaccard_loss_grad(y_star, y_hat) -> np.ndarray:
    """Closed-form gradient of ``jaccard_loss`` with respect to ``y_hat``.

    With I = sum(y* y^) and U = sum(y* + y^) - I, dJ/dy^_k = (y*_k U - I (1 - y*_k)) / U^2.
    """
    a, b = _check(y_star, y_hat)
    inter = float(np.sum(a * b))
    union = float(np.sum(a + b)) - inter
    if union == 0.0:
        raise ValueError("Jaccard loss is not differentiable where both maps are empty")
    return -(a * union - inter * (1.0 - a)) / union**2


def soft_jaccard_loss(y_star: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Batch-mean of per-sample 1 - J on tensors shaped (N, ...)."""
    if y_star.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y_star.shape)} vs {tuple(y_hat.shape)}")
    dims = tuple(range(1, y_hat.ndim))
    a = y_star.to(torch.float64)
    b = y_hat.to(torch.float64)
    inter = (a * b).sum(dim=dims)
    union = (a + b).sum(dim=dims) - inter
    empty = union == 0
    j = torch.where(empty, torch.ones_like(inter), inter / torch.where(empty, torch.ones_like(union), union))
    return (1.0 - j).mean()


def gain(new_score: float, baseline: float) -> float:
    """Relative improvement (new - baseline) / baseline."""
    if not baseline > 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return (new_score - baseline) / baseline
