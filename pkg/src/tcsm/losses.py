"""Training objective: supervised cross-entropy, consistency penalty, ramp-up.

Both loss terms are fused tape operations: they consume probability maps and
produce scalars in one recorded node each, with hand-derived gradients.  The
consistency weight follows a Gaussian ramp k * exp(-5 (1 - T)^2) in the
progress variable T = min(epoch / rampup_epochs, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record_op
from .errors import ConfigError, NumericError, ShapeError

# probabilities are clipped to at least this before the log; where the clip is
# active the gradient is defined as zero
CE_EPS = 1e-12


def _check_probs(name: str, probs: Tensor) -> None:
    if not isinstance(probs, Tensor):
        raise ShapeError(f"{name} expects a Tensor of probabilities")
    if probs.data.ndim != 4:
        raise ShapeError(f"{name} expects NCHW probabilities, got shape {probs.data.shape}")


def _ce_grad(go: np.ndarray, probs_data: np.ndarray, labels: np.ndarray,
             mask: np.ndarray, denom: float) -> tuple:
    grad = np.zeros_like(probs_data)
    p_true = np.take_along_axis(probs_data, labels[:, None], axis=1)
    coef = np.where(p_true > CE_EPS, -1.0 / np.maximum(p_true, CE_EPS), 0.0) / denom
    coef = coef * mask[:, None, None, None]
    np.put_along_axis(grad, labels[:, None], coef, axis=1)
    return (grad * go,)


def supervised_ce(probs: Tensor, labels: np.ndarray, labeled_mask: np.ndarray) -> Tensor:
    """Pixel cross-entropy averaged over labeled samples and all pixels.

    ``labels`` holds integer class ids, shape (N, H, W); ``labeled_mask`` is a
    boolean (N,) selecting which samples contribute.
    """
    _check_probs("supervised_ce", probs)
    n, c, h, w = probs.data.shape
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match probabilities "
                         f"{(n, h, w)}")
    if np.issubdtype(labels.dtype, np.floating):
        rounded = np.rint(labels)
        if not np.array_equal(rounded, labels):
            raise ShapeError("labels must hold integral class ids")
        labels = rounded.astype(np.int64)
    elif not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels out of range [0, {c})")
    mask = np.asarray(labeled_mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"labeled_mask shape {mask.shape} does not match batch size {n}")
    n_labeled = int(mask.sum())
    if n_labeled == 0:
        raise ShapeError("supervised_ce: batch contains no labeled samples")

    p_true = np.take_along_axis(probs.data, labels[:, None], axis=1)[:, 0]
    per_pixel = -np.log(np.maximum(p_true, CE_EPS))
    loss = per_pixel[mask].sum() / (n_labeled * h * w)

    probs_data, denom = probs.data, float(n_labeled * h * w)
    return record_op("supervised_ce", (probs,), loss,
                     lambda go: _ce_grad(go, probs_data, labels, mask, denom))


def _mse_grads(go: np.ndarray, diff: np.ndarray, size: float) -> tuple:
    g = (2.0 / size) * diff * go
    return g, -g


def consistency_mse(z: Tensor, z_tilde: Tensor) -> Tensor:
    """Mean squared difference between two probability maps, gradient into both."""
    _check_probs("consistency_mse", z)
    _check_probs("consistency_mse", z_tilde)
    if z.data.shape != z_tilde.data.shape:
        raise ShapeError(f"consistency_mse: shapes differ, {z.data.shape} vs "
                         f"{z_tilde.data.shape}")
    diff = z.data - z_tilde.data
    size = float(diff.size)
    loss = (diff * diff).sum() / size
    return record_op("consistency_mse", (z, z_tilde), loss,
                     lambda go: _mse_grads(go, diff, size))


@dataclass(frozen=True)
class RampUpSchedule:
    """Consistency weight schedule: k * exp(-5 (1 - T)^2), T clamped to [0, 1].

    ``rampup_epochs == 0`` means no ramp: the weight is k from the start.
    Only the gaussian shape exists; ``mode`` is validated for forward
    compatibility of config files.
    """

    k: float = 1.0
    rampup_epochs: int = 0
    mode: str = "gaussian"

    def __post_init__(self):
        if self.k < 0 or not math.isfinite(self.k):
            raise ConfigError(f"ramp-up k must be >= 0, got {self.k}")
        if self.rampup_epochs < 0:
            raise ConfigError(f"rampup_epochs must be >= 0, got {self.rampup_epochs}")
        if self.mode != "gaussian":
            raise ConfigError(f"unknown ramp-up mode {self.mode!r}")


def rampup_weight(epoch: int, schedule: RampUpSchedule) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if schedule.rampup_epochs == 0:
        progress = 1.0
    else:
        progress = min(epoch / schedule.rampup_epochs, 1.0)
    return schedule.k * math.exp(-5.0 * (1.0 - progress) ** 2)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar record of one training step's objective."""

    supervised: float
    consistency: float
    weight: float
    total: float


def total_loss(supervised: float, consistency: float, weight: float) -> LossBreakdown:
    """Combine already-evaluated scalar terms; the differentiable sum is built
    on the tape separately with add/scale."""
    supervised, consistency, weight = float(supervised), float(consistency), float(weight)
    for name, value in (("supervised", supervised), ("consistency", consistency),
                        ("weight", weight)):
        if not math.isfinite(value):
            raise NumericError(f"total_loss: {name} term is not finite")
    return LossBreakdown(
        supervised=supervised,
        consistency=consistency,
        weight=weight,
        total=supervised + weight * consistency,
    )
