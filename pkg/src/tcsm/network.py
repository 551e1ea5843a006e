"""A small encoder-decoder segmentation network over the autodiff primitives.

The model is a plain function of (config, params, input): parameters live in an
ordered dict of named tensors, so saving, loading, and optimizer steps never
touch network code.  Each encoder level is conv-relu-conv-relu followed by 2x2
max pooling; the decoder mirrors it with nearest upsampling and skip
concatenation; a 1x1 head plus channel softmax produces per-pixel class
probabilities.

Training perturbations (input noise, feature dropout before the head) only
exist in "train" mode; "eval" mode is a pure function of the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    num_classes: int = 2
    dropout_rate: float = 0.3
    kernel_size: int = 3

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass(frozen=True)
class Perturb:
    """Stochastic input/feature perturbations used in train mode."""

    noise_sigma: float = 0.0
    dropout_rate: float = 0.0


class PerturbStreams(NamedTuple):
    """Independent generators for the two perturbation sources."""

    noise: np.random.Generator
    dropout: np.random.Generator


def make_perturb_streams(entropy) -> PerturbStreams:
    """Build the two streams from an int seed or a SeedSequence."""
    if not isinstance(entropy, np.random.SeedSequence):
        entropy = np.random.SeedSequence(entropy)
    noise_ss, dropout_ss = entropy.spawn(2)
    return PerturbStreams(np.random.default_rng(noise_ss), np.random.default_rng(dropout_ss))


def _layer_plan(config: SegNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel) for every conv, in parameter order."""
    k = config.kernel_size
    plan = []
    c_prev = config.in_channels
    enc_out = []
    for lvl in range(config.depth):
        c = config.base_channels * (2 ** lvl)
        plan.append((f"enc{lvl}.conv1", c_prev, c, k))
        plan.append((f"enc{lvl}.conv2", c, c, k))
        enc_out.append(c)
        c_prev = c
    c_mid = config.base_channels * (2 ** config.depth)
    plan.append(("bottleneck.conv1", c_prev, c_mid, k))
    plan.append(("bottleneck.conv2", c_mid, c_mid, k))
    c_prev = c_mid
    for lvl in reversed(range(config.depth)):
        c = config.base_channels * (2 ** lvl)
        plan.append((f"dec{lvl}.conv1", c_prev + enc_out[lvl], c, k))
        plan.append((f"dec{lvl}.conv2", c, c, k))
        c_prev = c
    plan.append(("head", c_prev, config.num_classes, 1))
    return plan


def init_params(config: SegNetConfig, seed) -> dict[str, Tensor]:
    """He-initialized weights, zero biases; insertion order is layer order."""
    if isinstance(seed, np.random.SeedSequence):
        rng = np.random.default_rng(seed)
    else:
        rng = np.random.default_rng(int(seed))
    params: dict[str, Tensor] = {}
    for name, c_in, c_out, k in _layer_plan(config):
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)),
                                          requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
    return params


def param_count(config: SegNetConfig) -> int:
    total = 0
    for _, c_in, c_out, k in _layer_plan(config):
        total += c_out * c_in * k * k + c_out
    return total


def infer_config(params: dict[str, Tensor], dropout_rate: float = 0.3) -> SegNetConfig:
    """Recover the architecture from parameter names and shapes.

    Lets evaluation run from a checkpoint alone; ``dropout_rate`` is not
    recoverable (train-time only) and defaults.
    """
    try:
        first = params["enc0.conv1.weight"].data
        head = params["head.weight"].data
    except KeyError as exc:
        raise ShapeError(f"parameter map is missing {exc.args[0]}") from None
    depth = 0
    while f"enc{depth}.conv1.weight" in params:
        depth += 1
    config = SegNetConfig(
        in_channels=int(first.shape[1]),
        base_channels=int(first.shape[0]),
        depth=depth,
        num_classes=int(head.shape[0]),
        dropout_rate=dropout_rate,
        kernel_size=int(first.shape[2]),
    )
    expected = {f"{name}.{kind}" for name, _, _, _ in _layer_plan(config)
                for kind in ("weight", "bias")}
    if expected != set(params):
        raise ShapeError("parameter names do not form a recognizable network")
    return config


def _conv_block(h: Tensor, params: dict, name: str, padding: int) -> Tensor:
    h = ad.conv2d(h, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"],
                  padding=padding)
    h = ad.relu(h)
    h = ad.conv2d(h, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"],
                  padding=padding)
    return ad.relu(h)


def forward(
    config: SegNetConfig,
    params: dict[str, Tensor],
    batch,
    perturb: Perturb | None = None,
    mode: str = "eval",
    rng: PerturbStreams | None = None,
) -> Tensor:
    """Per-pixel class probabilities, shape (N, num_classes, H, W).

    "train" mode adds input noise and pre-head dropout using ``rng``; "eval"
    mode ignores ``perturb`` and ``rng`` entirely and is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4:
        raise ShapeError(f"network input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if c != config.in_channels:
        raise ShapeError(f"input has {c} channels, config expects {config.in_channels}")
    factor = 2 ** config.depth
    if h % factor or w % factor:
        raise ShapeError(f"spatial extents {h}x{w} must be divisible by {factor}")

    train = mode == "train"
    if train and perturb is None:
        perturb = Perturb()
    if train and (perturb.noise_sigma > 0 or perturb.dropout_rate > 0) and rng is None:
        raise ConfigError("train mode with perturbations needs rng streams")

    # the plan names select tensors, so declared channel widths must also be
    # checked against the actual parameter shapes
    for name, c_in, c_out, kernel in _layer_plan(config):
        weight_name = f"{name}.weight"
        if weight_name not in params:
            raise ShapeError(f"params are missing {weight_name!r}")
        shape = params[weight_name].data.shape
        if shape != (c_out, c_in, kernel, kernel):
            raise ShapeError(f"{weight_name} has shape {shape}, config expects "
                             f"{(c_out, c_in, kernel, kernel)}")

    pad = config.kernel_size // 2
    if train and perturb.noise_sigma > 0:
        x = ad.add_gaussian_noise(x, perturb.noise_sigma, rng.noise)

    skips = []
    feat = x
    for lvl in range(config.depth):
        feat = _conv_block(feat, params, f"enc{lvl}", pad)
        skips.append(feat)
        feat = ad.maxpool2(feat)
    feat = _conv_block(feat, params, "bottleneck", pad)
    for lvl in reversed(range(config.depth)):
        feat = ad.upsample2(feat)
        feat = ad.concat_channels(feat, skips[lvl])
        feat = _conv_block(feat, params, f"dec{lvl}", pad)

    if train and perturb.dropout_rate > 0:
        feat = ad.dropout(feat, perturb.dropout_rate, rng.dropout)
    logits = ad.conv2d(feat, params["head.weight"], params["head.bias"])
    return ad.softmax_channels(logits)
