"""Composite segmentation loss (weighted binary cross entropy minus the log
of a soft Jaccard overlap) and the Dice evaluation metrics.

The differentiable pieces operate on :class:`~fednet.tensor.Tensor`; the Dice
metrics operate on plain binary numpy masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LossWeights:
    """omega1 balances the two cross-entropy terms, omega2 scales the Jaccard
    term, epsilon guards the Jaccard denominator, clamp_delta bounds
    predictions away from 0 and 1 before taking logs."""

    omega1: float = 0.5
    omega2: float = 1.0
    epsilon: float = 1e-15
    clamp_delta: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.omega1 < 1.0:
            raise ValueError(f"omega1 must lie in (0, 1), got {self.omega1}")
        if self.omega2 < 0.0:
            raise ValueError(f"omega2 must be >= 0, got {self.omega2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.clamp_delta < 0.5:
            raise ValueError(f"clamp_delta must lie in (0, 0.5), got {self.clamp_delta}")


def _validate_pair(y: Tensor, y_hat: Tensor, op: str) -> None:
    if y.shape != y_hat.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    yd = y.data
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError(f"{op}: ground truth must be binary")
    pd = y_hat.data
    if pd.size and (pd.min() < 0 or pd.max() > 1):
        raise ValueError(f"{op}: predictions must lie in [0, 1]")


def weighted_bce(y, y_hat, w: LossWeights = LossWeights()) -> Tensor:
    """Mean over elements of
    (omega1 - 1) * y * log(p) - omega1 * (1 - y) * log(1 - p),
    with p the prediction clamped to [delta, 1 - delta]."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    _validate_pair(y, y_hat, "weighted_bce")
    p = y_hat.clamp(w.clamp_delta, 1.0 - w.clamp_delta)
    pos = y * p.log() * (w.omega1 - 1.0)
    negm = (1.0 - y) * (1.0 - p).log() * w.omega1
    return (pos - negm).mean()


def soft_jaccard(y, y_hat, epsilon: float = 1e-15) -> Tensor:
    """(sum(y*p) + eps) / (sum(y) + sum(p) - sum(y*p) + eps) over the whole
    pair; equals the set Jaccard index exactly when predictions are binary,
    and 1 when both sides are empty."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    _validate_pair(y, y_hat, "soft_jaccard")
    inter = (y * y_hat).sum()
    union = y.sum() + y_hat.sum() - inter
    return (inter + epsilon) / (union + epsilon)


def combined_loss(y, y_hat, w: LossWeights = LossWeights(), per_slice: bool = True) -> Tensor:
    """weighted_bce - omega2 * log(soft_jaccard).

    For 4-d batches with ``per_slice`` set, the Jaccard term is computed per
    batch element, its log averaged over the batch; otherwise the whole pair
    is treated as one slice.  Differentiable in the predictions and
    non-negative for omega1 in (0, 1), omega2 >= 0.
    """
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    _validate_pair(y, y_hat, "combined_loss")
    bce = weighted_bce(y, y_hat, w)
    if per_slice and y.ndim == 4:
        axes = (1, 2, 3)
        inter = (y * y_hat).sum(axes)
        union = y.sum(axes) + y_hat.sum(axes) - inter
        jac = (inter + w.epsilon) / (union + w.epsilon)
        log_jac = jac.log().mean()
    else:
        log_jac = soft_jaccard(y, y_hat, w.epsilon).log()
    return bce - log_jac * w.omega2


# ---------------------------------------------------------------------------
# Dice metrics on binary numpy masks
# ---------------------------------------------------------------------------


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a & b| / (|a| + |b|); defined as 1.0 when both masks are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_per_case(cases: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Unweighted mean of per-volume Dice scores."""
    if not cases:
        raise ValueError("dice_per_case: need at least one case")
    return float(np.mean([dice(a, b) for a, b in cases]))


def dice_global(cases: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Dice on voxel counts pooled across all cases."""
    if not cases:
        raise ValueError("dice_global: need at least one case")
    inter = 0
    total = 0
    for a, b in cases:
        a = np.asarray(a).astype(bool)
        b = np.asarray(b).astype(bool)
        if a.shape != b.shape:
            raise ValueError(f"dice_global: shape mismatch {a.shape} vs {b.shape}")
        inter += int(np.logical_and(a, b).sum())
        total += int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total
