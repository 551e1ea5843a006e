"""Finite-difference verification of every backward rule in the engine.

Each registered check builds small deterministic inputs, evaluates a scalar
projection of one operation, and compares tape gradients against central
differences (h = 1e-6) elementwise.  Stochastic ops re-seed their generator
per evaluation so the forward map stays a pure function of its inputs.  The
end-to-end check differentiates the full dual-pass training objective of a
depth-1 network through sampled parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff, transforms
from .autodiff import Tape, Tensor, backward, record_op
from .losses import consistency_mse, supervised_ce
from .network import Perturb, PerturbStreams, SegNetConfig, forward, init_params

FD_STEP = 1e-6
OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4
_REL_FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _wsum(x: Tensor, w: np.ndarray) -> Tensor:
    """Fixed-weight scalar projection so any op output can be differentiated."""
    out = np.float64((x.data * w).sum())
    return record_op("wsum", (x,), out, lambda go: (w * float(go),))


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(numeric), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _check(build):
    """Compare tape gradients of ``build`` against central differences.

    ``build`` maps a tuple of ndarrays to a scalar Tensor; it is re-invoked
    for every probe so it must be deterministic in its inputs.
    """

    def run(*arrays):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build(*tensors)
            backward(loss, tape)
        worst = 0.0
        for slot, arr in enumerate(arrays):
            analytic = tensors[slot].grad
            numeric = np.empty_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + FD_STEP
                hi = build(*(Tensor(a) for a in arrays)).item()
                flat[i] = keep - FD_STEP
                lo = build(*(Tensor(a) for a in arrays)).item()
                flat[i] = keep
                numeric.reshape(-1)[i] = (hi - lo) / (2 * FD_STEP)
            worst = max(worst, _max_rel_error(analytic, numeric))
        return worst

    return run


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _smooth(rng, shape, low=0.25, high=0.85):
    # values away from relu kinks, pool ties, and the CE clip region
    return rng.uniform(low, high, shape)


def _projection(rng, shape):
    return rng.uniform(-1.0, 1.0, shape)


def _check_add(seed):
    rng = _rng(seed)
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    w = _projection(rng, a.shape)
    return _check(lambda ta, tb: _wsum(autodiff.add(ta, tb), w))(a, b)


def _check_scale(seed):
    rng = _rng(seed)
    x = rng.standard_normal((3, 5))
    w = _projection(rng, x.shape)
    return _check(lambda t: _wsum(autodiff.scale(t, -1.7), w))(x)


def _check_relu(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    x[np.abs(x) < 0.05] += 0.1  # stay off the kink
    w = _projection(rng, x.shape)
    return _check(lambda t: _wsum(autodiff.relu(t), w))(x)


def _check_dropout(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 4, 4, 4)) + 3.0
    w = _projection(rng, x.shape)

    def build(t):
        return _wsum(autodiff.dropout(t, 0.4, _rng(seed + 1)), w)

    return _check(build)(x)


def _check_gaussian_noise(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 1, 4, 4))
    w = _projection(rng, x.shape)

    def build(t):
        return _wsum(autodiff.add_gaussian_noise(t, 0.3, _rng(seed + 1)), w)

    return _check(build)(x)


def _check_conv2d(seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    weight = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    w = _projection(rng, (1, 3, 6, 6))
    return _check(lambda tx, tw, tb: _wsum(
        autodiff.conv2d(tx, tw, tb, stride=1, padding=1), w))(x, weight, bias)


def _check_maxpool2(seed):
    rng = _rng(seed)
    # a shuffled grid has no ties, so the argmax routing is stable under probes
    x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    w = _projection(rng, (1, 1, 4, 4))
    return _check(lambda t: _wsum(autodiff.maxpool2(t), w))(x)


def _check_upsample2(seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 3, 3))
    w = _projection(rng, (1, 2, 6, 6))
    return _check(lambda t: _wsum(autodiff.upsample2(t), w))(x)


def _check_softmax_channels(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    w = _projection(rng, x.shape)
    return _check(lambda t: _wsum(autodiff.softmax_channels(t), w))(x)


def _check_concat_channels(seed):
    rng = _rng(seed)
    a, b = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    w = _projection(rng, (2, 5, 4, 4))
    return _check(lambda ta, tb: _wsum(autodiff.concat_channels(ta, tb), w))(a, b)


def _check_transform_apply(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 5, 5))
    w = _projection(rng, x.shape)
    op = transforms.TransformOp.FLIP_ROT90
    return _check(lambda t: _wsum(transforms.apply(op, t), w))(x)


def _check_transform_apply_batch(seed):
    rng = _rng(seed)
    x = rng.standard_normal((4, 2, 5, 5))
    w = _projection(rng, x.shape)
    ops = transforms.sample_batch(_rng(seed + 1), 4, full_group=True)
    return _check(lambda t: _wsum(transforms.apply_batch(ops, t), w))(x)


def _check_supervised_ce(seed):
    rng = _rng(seed)
    probs = _smooth(rng, (3, 2, 4, 4))
    labels = rng.integers(0, 2, (3, 4, 4))
    mask = np.array([True, False, True])
    return _check(lambda t: supervised_ce(t, labels, mask))(probs)


def _check_consistency_mse(seed):
    rng = _rng(seed)
    z = _smooth(rng, (2, 2, 4, 4))
    zt = _smooth(rng, (2, 2, 4, 4))
    return _check(lambda a, b: consistency_mse(a, b))(z, zt)


def _end_to_end_objective(config, params, images, labels, mask, seed):
    rng = _rng(seed)
    ops = transforms.sample_batch(rng, images.shape[0], full_group=True)
    perturb = Perturb(noise_sigma=0.05, dropout_rate=0.2)

    def streams():
        noise_ss, dropout_ss = np.random.SeedSequence(seed + 1).spawn(2)
        return PerturbStreams(np.random.default_rng(noise_ss),
                              np.random.default_rng(dropout_ss))

    shared = streams()
    x = Tensor(images)
    probs_a = forward(config, params, x, perturb, "train", shared)
    z = transforms.apply_batch(ops, probs_a)
    x_t = Tensor(transforms.apply_batch(ops, images))
    probs_b = forward(config, params, x_t, perturb, "train", shared)
    labels_t = np.stack([transforms.apply(op, lbl) for op, lbl in zip(ops, labels)])
    sup = supervised_ce(probs_b, labels_t, mask)
    cons = consistency_mse(z, probs_b)
    return autodiff.add(sup, autodiff.scale(cons, 0.5))


def _check_end_to_end(seed, max_probes=200):
    """FD through sampled parameters of the full dual-pass objective."""
    rng = _rng(seed)
    config = SegNetConfig(in_channels=1, base_channels=4, depth=1, num_classes=2)
    params = init_params(config, seed=seed)
    images = rng.standard_normal((2, 1, 8, 8))
    labels = rng.integers(0, 2, (2, 8, 8))
    mask = np.array([True, False])

    def objective():
        return _end_to_end_objective(config, params, images, labels, mask, seed)

    with Tape() as tape:
        loss = objective()
        backward(loss, tape)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for p in params.values():
        p.grad = None

    flats = [(name, params[name].data.reshape(-1)) for name in params]
    total = sum(flat.size for _, flat in flats)
    probe_ids = sorted(rng.choice(total, size=min(max_probes, total), replace=False))

    worst = 0.0
    offsets = np.cumsum([0] + [flat.size for _, flat in flats])
    for probe in probe_ids:
        slot = int(np.searchsorted(offsets, probe, side="right")) - 1
        name, flat = flats[slot]
        i = probe - offsets[slot]
        keep = flat[i]
        flat[i] = keep + FD_STEP
        hi = objective().item()
        flat[i] = keep - FD_STEP
        lo = objective().item()
        flat[i] = keep
        numeric = (hi - lo) / (2 * FD_STEP)
        a = analytic[name].reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(abs(numeric), _REL_FLOOR))
    return worst


_REGISTRY = (
    ("add", _check_add, OP_TOLERANCE),
    ("scale", _check_scale, OP_TOLERANCE),
    ("relu", _check_relu, OP_TOLERANCE),
    ("dropout", _check_dropout, OP_TOLERANCE),
    ("gaussian_noise", _check_gaussian_noise, OP_TOLERANCE),
    ("conv2d", _check_conv2d, OP_TOLERANCE),
    ("maxpool2", _check_maxpool2, OP_TOLERANCE),
    ("upsample2", _check_upsample2, OP_TOLERANCE),
    ("softmax_channels", _check_softmax_channels, OP_TOLERANCE),
    ("concat_channels", _check_concat_channels, OP_TOLERANCE),
    ("transform_apply", _check_transform_apply, OP_TOLERANCE),
    ("transform_apply_batch", _check_transform_apply_batch, OP_TOLERANCE),
    ("supervised_ce", _check_supervised_ce, OP_TOLERANCE),
    ("consistency_mse", _check_consistency_mse, OP_TOLERANCE),
    ("end_to_end", _check_end_to_end, END_TO_END_TOLERANCE),
)


def registered_names() -> list:
    return [name for name, _, _ in _REGISTRY]


def run_all(seed: int = 0) -> list:
    return [CheckResult(name, float(fn(seed)), tol) for name, fn, tol in _REGISTRY]


def report_lines(results) -> list:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{r.name:<22s} max_rel_err={r.max_rel_error:.3e} "
                     f"tol={r.tolerance:.0e} {status}")
    return lines
