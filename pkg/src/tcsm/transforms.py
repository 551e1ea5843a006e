"""The eight symmetries of the square, applied to images and probability maps.

Every element is a horizontal flip (or not) composed with k counterclockwise
quarter turns, acting on the last two axes of an array: ``x -> flip^f(rot^k(x))``
with the rotation applied first.  All actions are exact index permutations, so
applying one never interpolates and the group laws hold bit for bit.

Training samples from a five-element subset (identity, the three proper
rotations, and the horizontal flip); the full group is available behind a flag.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .autodiff import Tensor, record_op
from .errors import ShapeError


class TransformOp(Enum):
    """(flip, quarter_turns) pairs; the rotation acts first, the horizontal
    flip (when present) second."""

    ROT0 = (0, 0)
    ROT90 = (0, 1)
    ROT180 = (0, 2)
    ROT270 = (0, 3)
    FLIP = (1, 0)
    FLIP_ROT90 = (1, 1)
    FLIP_ROT180 = (1, 2)
    FLIP_ROT270 = (1, 3)

    @property
    def flip(self) -> int:
        return self.value[0]

    @property
    def quarter_turns(self) -> int:
        return self.value[1]


_FROM_VALUE = {op.value: op for op in TransformOp}

# the subset used when drawing per-sample transforms during training; the
# three flip-rotation composites exist for closure and testing only
SAMPLE_OPS = (
    TransformOp.ROT0,
    TransformOp.ROT90,
    TransformOp.ROT180,
    TransformOp.ROT270,
    TransformOp.FLIP,
)


def _check_square(arr: np.ndarray) -> None:
    if arr.ndim < 2:
        raise ShapeError(f"transform input needs at least 2 dims, got shape {arr.shape}")
    if arr.shape[-1] != arr.shape[-2]:
        raise ShapeError(f"transform input must be square in the last two axes, "
                         f"got shape {arr.shape}")


def _act(arr: np.ndarray, flip: int, quarter_turns: int) -> np.ndarray:
    out = np.rot90(arr, quarter_turns, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def compose(a: TransformOp, b: TransformOp) -> TransformOp:
    """The single element equal to applying ``b`` first, then ``a``."""
    fa, ka = a.value
    fb, kb = b.value
    if fb == 0:
        return _FROM_VALUE[(fa, (ka + kb) % 4)]
    return _FROM_VALUE[(fa ^ 1, (kb - ka) % 4)]


def inverse(op: TransformOp) -> TransformOp:
    f, k = op.value
    if f:
        return op  # every flip-containing element of the group is an involution
    return _FROM_VALUE[(0, (4 - k) % 4)]


def _apply_grad(go: np.ndarray, inv: TransformOp) -> tuple:
    return (_act(go, *inv.value),)


def apply(op: TransformOp, x):
    """Apply ``op`` to a Tensor (recorded, gradient flows through the inverse
    permutation) or a raw ndarray (plain transform, dtype preserved)."""
    if isinstance(x, Tensor):
        _check_square(x.data)
        inv = inverse(op)
        out = _act(x.data, *op.value)
        return record_op(f"transform_{op.name.lower()}", (x,), out,
                         lambda go: _apply_grad(go, inv))
    arr = np.asarray(x)
    _check_square(arr)
    return _act(arr, *op.value)


def _apply_batch_grad(go: np.ndarray, inverses: list) -> tuple:
    gx = np.empty_like(go)
    for i, inv in enumerate(inverses):
        gx[i] = _act(go[i], *inv.value)
    return (gx,)


def apply_batch(ops, x):
    """Apply ``ops[i]`` to sample ``i`` of an NCHW batch."""
    is_tensor = isinstance(x, Tensor)
    data = x.data if is_tensor else np.asarray(x)
    if data.ndim != 4:
        raise ShapeError(f"apply_batch input must be NCHW, got shape {data.shape}")
    if len(ops) != data.shape[0]:
        raise ShapeError(f"got {len(ops)} ops for a batch of {data.shape[0]}")
    _check_square(data)
    out = np.empty_like(data)
    for i, op in enumerate(ops):
        out[i] = _act(data[i], *op.value)
    if not is_tensor:
        return out
    inverses = [inverse(op) for op in ops]
    return record_op("transform_batch", (x,), out,
                     lambda go: _apply_batch_grad(go, inverses))


def sample(rng: np.random.Generator, full_group: bool = False) -> TransformOp:
    ops = tuple(TransformOp) if full_group else SAMPLE_OPS
    return ops[int(rng.integers(len(ops)))]


def sample_batch(rng: np.random.Generator, n: int, full_group: bool = False) -> list:
    return [sample(rng, full_group) for _ in range(n)]
