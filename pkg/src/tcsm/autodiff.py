"""Reverse-mode automatic differentiation on a flat operation tape.

A ``Tensor`` wraps a contiguous float64 numpy array.  While a ``Tape`` is
active (as a context manager), every primitive records one node; ``backward``
replays the nodes in reverse order and accumulates gradients into the leaf
tensors that requested them.  With no active tape the primitives are plain
numpy forward passes, which is what inference uses.

Gradient rules live in module-level ``_*_grad*`` functions rather than inline
closures so a test can deliberately corrupt one and confirm the finite
difference checker notices.  Backward functions must return freshly allocated
arrays (or the incoming gradient itself, which is dead after the call); two
returned gradients must never alias each other.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d to 1-d; 0-d arrays are
            # always contiguous so they never reach this branch
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # Maps d(loss)/d(output) to a tuple of d(loss)/d(input), one per input,
    # None for inputs that do not need a gradient.
    backward_fn: Callable[[np.ndarray], tuple]


_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, replayed backwards by ``backward``."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def clear(self, zero_grads: bool = False) -> None:
        if zero_grads:
            for node in self.nodes:
                for t in node.inputs:
                    t.grad = None
                node.output.grad = None
        self.nodes.clear()


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in output of {op}")


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record a node if a tape is active.

    Shared by the fused operations in other modules (losses, transforms) so
    they participate in the same tape as the primitives here.
    """
    out = Tensor(out_data)
    _check_finite(op, out.data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    ``loss`` must be scalar (shape ``()``).  Raises NumericError if any value
    touched along the way is NaN or infinite.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor loss")
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        go = grads.pop(id(node.output), None)
        if go is None:
            continue  # output never influenced the loss
        input_grads = node.backward_fn(go)
        if len(input_grads) != len(node.inputs):
            raise RuntimeError(f"op {node.op}: backward returned {len(input_grads)} grads "
                               f"for {len(node.inputs)} inputs")
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(f"op {node.op}: gradient shape {g.shape} does not match "
                                 f"input shape {t.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient out of {node.op}")
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = g
                holders[id(t)] = t
            else:
                acc += g

    for key, g in grads.items():
        if key in produced:
            continue  # interior tensor whose producing node was skipped
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# primitives


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _add_grads(go: np.ndarray) -> tuple:
    return go, go.copy()


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ, {a.data.shape} vs {b.data.shape}")
    return record_op("add", (a, b), a.data + b.data, lambda go: _add_grads(go))


def _scale_grad(go: np.ndarray, c: float) -> tuple:
    return (go * c,)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale: factor is not finite")
    return record_op("scale", (x,), x.data * c, lambda go: _scale_grad(go, c))


def _relu_grad(go: np.ndarray, xd: np.ndarray) -> tuple:
    return (go * (xd > 0.0),)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return record_op("relu", (x,), np.maximum(xd, 0.0), lambda go: _relu_grad(go, xd))


def _mask_grad(go: np.ndarray, mask: np.ndarray) -> tuple:
    return (go * mask,)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: kept entries are rescaled by 1/(1-rate).

    Identity when ``training`` is false or ``rate`` is 0; neither case draws
    anything from ``rng``.
    """
    x = _as_tensor(x)
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if not isinstance(rng, np.random.Generator):
        raise ConfigError("dropout needs a numpy Generator")
    keep = rng.random(x.data.shape) >= rate
    scale_mask = keep / (1.0 - rate)
    return record_op("dropout", (x,), x.data * scale_mask, lambda go: _mask_grad(go, scale_mask))


def _noise_grad(go: np.ndarray) -> tuple:
    return (go,)


def add_gaussian_noise(x: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """Additive N(0, sigma^2) noise; sigma == 0 is an identity with no draw."""
    x = _as_tensor(x)
    sigma = float(sigma)
    if sigma < 0.0 or not np.isfinite(sigma):
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        raise ConfigError("add_gaussian_noise needs a numpy Generator")
    noise = rng.normal(0.0, sigma, size=x.data.shape)
    return record_op("add_gaussian_noise", (x,), x.data + noise, lambda go: _noise_grad(go))


def _conv2d_grads(
    go: np.ndarray,
    cols: np.ndarray,
    wmat: np.ndarray,
    x_shape: tuple,
    w_shape: tuple,
    stride: int,
    padding: int,
    has_bias: bool,
) -> tuple:
    n, c, h, w = x_shape
    c_out, c_in, kh, kw = w_shape
    hp, wp = go.shape[2], go.shape[3]
    go_mat = go.reshape(n, c_out, hp * wp)

    grad_w = np.matmul(go_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
    grad_cols = np.matmul(wmat.T[None], go_mat)  # (n, c*kh*kw, hp*wp)

    gtiles = grad_cols.reshape(n, c, kh, kw, hp, wp)
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + hp * stride : stride, j : j + wp * stride : stride] += gtiles[:, :, i, j]
    grad_x = np.ascontiguousarray(gpad[:, :, padding : padding + h, padding : padding + w])

    grad_b = go.sum(axis=(0, 2, 3)) if has_bias else None
    return grad_x, grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over NCHW input with an odd square kernel."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (out, in, k, k), got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd and square, got {kh}x{kw}")
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    stride, padding = int(stride), int(padding)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (w + 2 * padding - kw) // stride + 1
    if hp < 1 or wp < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}, "
                         f"kernel {kh}, stride {stride}, padding {padding}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, hp, wp),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(n, c * kh * kw, hp * wp)
    wmat = weight.data.reshape(c_out, c * kh * kw)
    out = np.matmul(wmat[None], cols)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, hp, wp)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    x_shape, w_shape = x.data.shape, weight.data.shape
    has_bias = bias is not None

    def bw(go: np.ndarray) -> tuple:
        gx, gw, gb = _conv2d_grads(go, cols, wmat, x_shape, w_shape, stride, padding, has_bias)
        return (gx, gw) if not has_bias else (gx, gw, gb)

    return record_op("conv2d", inputs, out, bw)


def _maxpool2_grad(go: np.ndarray, idx: np.ndarray, x_shape: tuple) -> tuple:
    n, c, h, w = x_shape
    flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None], go[..., None], axis=-1)
    gx = flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (np.ascontiguousarray(gx),)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    maximum in row-major window order."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    x_shape = x.data.shape
    return record_op("maxpool2", (x,), out, lambda go: _maxpool2_grad(go, idx, x_shape))


def _upsample2_grad(go: np.ndarray) -> tuple:
    n, c, h2, w2 = go.shape
    return (go.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2 input must be NCHW, got shape {x.data.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return record_op("upsample2", (x,), out, lambda go: _upsample2_grad(go))


def _softmax_grad(go: np.ndarray, s: np.ndarray) -> tuple:
    return (s * (go - (go * s).sum(axis=1, keepdims=True)),)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax along the channel axis of an NCHW tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"softmax_channels input must be NCHW, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return record_op("softmax_channels", (x,), s, lambda go: _softmax_grad(go, s))


def _concat_grads(go: np.ndarray, c_a: int) -> tuple:
    return (np.ascontiguousarray(go[:, :c_a]), np.ascontiguousarray(go[:, c_a:]))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels inputs must be NCHW")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    c_a = a.data.shape[1]
    return record_op("concat_channels", (a, b), out, lambda go: _concat_grads(go, c_a))


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Classical momentum update, in place.

    v <- momentum * v + g ; p <- p - lr * v.  ``velocity`` entries are created
    as zeros on first use and mutated in place afterwards.
    """
    lr, momentum = float(lr), float(momentum)
    if lr < 0.0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"missing gradients for parameters: {sorted(missing)}")
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise ShapeError(f"gradient for {name} is None")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter "
                             f"{name} shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[name] = v
        v *= momentum
        v += g
        p.data -= lr * v
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite values in parameter {name} after update")
