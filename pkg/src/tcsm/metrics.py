"""Confusion-matrix segmentation metrics and inference post-processing.

Scores are the usual five ratios (Jaccard, Dice, accuracy, sensitivity,
specificity) computed from exact integer pixel counts.  Any 0/0 ratio is
defined as 1.0: an empty prediction of an empty mask is a perfect match.
Post-processing binarizes a probability map at 0.5 (ties count as foreground)
and fills enclosed background holes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import network
from .autodiff import Tensor
from .errors import ShapeError


class ConfusionCounts(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int


class MetricScores(NamedTuple):
    ja: float
    di: float
    ac: float
    se: float
    sp: float


@dataclass(frozen=True)
class CaseResult:
    id: str
    scores: MetricScores


@dataclass(frozen=True)
class MetricReport:
    """Two aggregations over an evaluation pool.

    The top-level scores are means of the per-image ratios; ``pooled`` is
    computed from confusion counts summed over every pixel of every image.
    ``per_case_dice`` lists each image's Dice value in pool order.
    """

    ja: float
    di: float
    ac: float
    se: float
    sp: float
    pooled: MetricScores
    per_case_dice: list
    per_case_dice_mean: float
    cases: list


def _as_binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.isin(arr, (0, 1)).all():
        raise ShapeError(f"{name} must contain only 0 and 1 values")
    return arr.astype(bool)


def confusion(pred_mask, true_mask) -> ConfusionCounts:
    pred = _as_binary(pred_mask, "pred_mask")
    true = _as_binary(true_mask, "true_mask")
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    tp = int((pred & true).sum())
    tn = int((~pred & ~true).sum())
    fp = int((pred & ~true).sum())
    fn = int((~pred & true).sum())
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def metrics(counts: ConfusionCounts) -> MetricScores:
    tp, tn, fp, fn = counts
    if min(tp, tn, fp, fn) < 0:
        raise ShapeError(f"confusion counts must be non-negative, got {counts}")
    return MetricScores(
        ja=_ratio(tp, tp + fn + fp),
        di=_ratio(2 * tp, 2 * tp + fn + fp),
        ac=_ratio(tp + tn, tp + tn + fp + fn),
        se=_ratio(tp, tp + fn),
        sp=_ratio(tn, tn + fp),
    )


def threshold(probs, tau: float = 0.5) -> np.ndarray:
    """Foreground wherever the class-1 probability is >= tau."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.ndim != 3 or data.shape[0] < 2:
        raise ShapeError(f"threshold expects a (C,H,W) map with C >= 2, "
                         f"got shape {data.shape}")
    return (data[1] >= tau).astype(np.int64)


def fill_holes(mask) -> np.ndarray:
    """Flip background regions with no 4-connected path to the border."""
    fg = _as_binary(mask, "mask")
    if fg.ndim != 2:
        raise ShapeError(f"fill_holes expects a 2-d mask, got shape {fg.shape}")
    bg = ~fg
    reach = np.zeros_like(bg)
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] = bg[:, 0]
    reach[:, -1] = bg[:, -1]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= bg
        if (grown == reach).all():
            break
        reach = grown
    return (fg | (bg & ~reach)).astype(np.int64)


def predict_mask(net_config, params, image) -> np.ndarray:
    """Full inference for one image: eval forward, threshold, fill holes."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"predict_mask expects a 2-d image, got shape {image.shape}")
    probs = network.forward(net_config, params, Tensor(image[None, None]), mode="eval")
    return fill_holes(threshold(probs.data[0]))


def evaluate(params, examples, net_config=None) -> MetricReport:
    """Score labeled examples with the trained network.

    ``examples`` is a sequence of (id, image, mask) items.  When net_config
    is omitted the architecture is recovered from the parameter names.
    """
    examples = list(examples)
    if not examples:
        raise ShapeError("evaluate needs at least one labeled example")
    if net_config is None:
        net_config = network.infer_config(params)

    cases = []
    totals = np.zeros(4, dtype=np.int64)
    for ex in examples:
        pred = predict_mask(net_config, params, ex.image)
        counts = confusion(pred, ex.mask)
        totals += np.asarray(counts)
        cases.append(CaseResult(ex.id, metrics(counts)))

    means = [float(np.mean([case.scores[i] for case in cases])) for i in range(5)]
    per_case_dice = [case.scores.di for case in cases]
    return MetricReport(
        ja=means[0], di=means[1], ac=means[2], se=means[3], sp=means[4],
        pooled=metrics(ConfusionCounts(*(int(v) for v in totals))),
        per_case_dice=per_case_dice,
        per_case_dice_mean=float(np.mean(per_case_dice)),
        cases=cases,
    )
