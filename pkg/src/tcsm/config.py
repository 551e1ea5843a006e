"""Flat key=value run configuration shared by every command.

One namespace covers dataset generation, the network, training, and sweep
grids; builder functions project it onto the typed component configs.  A few
names are deliberately shared: ``seed`` drives both generation and training
(the commands run separately), and ``dropout_rate`` is the single pre-head
rate.  Ramp-up keys carry a ``rampup_`` prefix because ``mode`` already names
the training mode.  Precedence is defaults < config file < command-line
flags, and unknown keys are a hard error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import GenSpec
from .errors import ConfigError
from .losses import RampUpSchedule
from .network import SegNetConfig
from .trainer import TrainConfig

RESOLVED_NAME = "config_resolved.txt"


@dataclass(frozen=True)
class RunConfig:
    # dataset generation and split
    num_images: int = 200
    image_size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    bg_mean: float = 0.2
    bg_std: float = 0.05
    fg_mean: float = 0.75
    fg_std: float = 0.1
    texture_sigma: float = 0.15
    distractor_count: int = 4
    antialias: bool = True
    labeled_fraction: float = 0.1
    val_fraction: float = 0.1
    # training
    epochs: int = 30
    batch_size: int = 10
    lr0: float = 0.01
    momentum: float = 0.9
    lr_power: float = 0.9
    noise_sigma: float = 0.1
    dropout_rate: float = 0.3
    labeled_per_batch: int = -1  # -1: half the batch
    mode: str = "semi"
    ce_pass: str = "b"
    augment: bool = True
    full_transform_group: bool = False
    rampup_k: float = 1.0
    rampup_epochs: int = -1  # -1: plateau after 80% of the epochs
    rampup_mode: str = "gaussian"
    seed: int = 0
    # network
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    num_classes: int = 2
    kernel_size: int = 3
    # paths
    data_dir: str = "dataset"
    out_dir: str = "run"
    checkpoint: str = ""  # empty: <out_dir>/ckpt_final.tcsm
    # sweep grids
    sweep_seeds: tuple = (0, 1, 2)
    sweep_fractions: tuple = (0.05, 0.1, 0.25, 1.0)
    sweep_modes: tuple = ("supervised", "semi")


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


def _parse_int(raw: str) -> int:
    return int(raw, 10)


def _tuple_parser(element):
    def parse(raw: str) -> tuple:
        items = [cell.strip() for cell in raw.split(",") if cell.strip()]
        if not items:
            raise ValueError("expected a non-empty comma-separated list")
        return tuple(element(cell) for cell in items)

    return parse


def _parsers() -> dict:
    table = {}
    for field in dataclasses.fields(RunConfig):
        default = field.default
        if isinstance(default, bool):
            table[field.name] = _parse_bool
        elif isinstance(default, int):
            table[field.name] = _parse_int
        elif isinstance(default, float):
            table[field.name] = float
        elif isinstance(default, str):
            table[field.name] = str
    # tuple-valued grids get explicit element parsers
    table["sweep_seeds"] = _tuple_parser(_parse_int)
    table["sweep_fractions"] = _tuple_parser(float)
    table["sweep_modes"] = _tuple_parser(str)
    return table


_PARSERS = _parsers()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, source: str = "config") -> dict:
    """key=value lines to a raw-string mapping; later duplicates win."""
    raw = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if " #" in stripped:
            stripped = stripped[: stripped.index(" #")].strip()
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def apply_settings(config: RunConfig, raw: dict, source: str) -> RunConfig:
    updates = {}
    for key, value in raw.items():
        if key not in _PARSERS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        try:
            updates[key] = _PARSERS[key](value)
        except ValueError as err:
            raise ConfigError(f"{source}: bad value for {key!r}: {err}") from err
    return dataclasses.replace(config, **updates)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the optional file, then raw-string overrides."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        config = apply_settings(config, parse_config_text(path.read_text(), str(path)),
                                str(path))
    if overrides:
        config = apply_settings(config, overrides, "command line")
    return config


def resolved_text(config: RunConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(config, f.name))}"
             for f in sorted(dataclasses.fields(RunConfig), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def write_resolved(config: RunConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / RESOLVED_NAME).write_text(resolved_text(config))


def genspec(config: RunConfig) -> GenSpec:
    return GenSpec(
        num_images=config.num_images,
        image_size=config.image_size,
        min_shapes=config.min_shapes,
        max_shapes=config.max_shapes,
        bg_mean=config.bg_mean,
        bg_std=config.bg_std,
        fg_mean=config.fg_mean,
        fg_std=config.fg_std,
        texture_sigma=config.texture_sigma,
        distractor_count=config.distractor_count,
        antialias=config.antialias,
        seed=config.seed,
    )


def net_config(config: RunConfig) -> SegNetConfig:
    return SegNetConfig(
        in_channels=config.in_channels,
        base_channels=config.base_channels,
        depth=config.depth,
        num_classes=config.num_classes,
        dropout_rate=config.dropout_rate,
        kernel_size=config.kernel_size,
    )


def train_config(config: RunConfig) -> TrainConfig:
    if config.rampup_epochs < 0:
        schedule = None
    else:
        schedule = RampUpSchedule(k=config.rampup_k, rampup_epochs=config.rampup_epochs,
                                  mode=config.rampup_mode)
    return TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr0=config.lr0,
        momentum=config.momentum,
        lr_power=config.lr_power,
        noise_sigma=config.noise_sigma,
        dropout_rate=config.dropout_rate,
        schedule=schedule,
        seed=config.seed,
        labeled_per_batch=None if config.labeled_per_batch < 0 else config.labeled_per_batch,
        mode=config.mode,
        ce_pass=config.ce_pass,
        augment=config.augment,
        full_transform_group=config.full_transform_group,
        net=net_config(config),
    )
