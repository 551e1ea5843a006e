"""Training loop: balanced batches, dual-pass consistency objective, SGD.

One step draws a square symmetry per sample, runs the network twice with
independent noise/dropout draws, and penalizes the squared difference between
transform-then-predict and predict-then-transform.  Cross-entropy on the
labeled samples plus the ramped consistency weight gives the total objective.
Three modes mirror the usual baselines: "supervised" trains on labeled data
with cross-entropy only, "supervised_plus_reg" adds the consistency term on
labeled batches, and "semi" mixes unlabeled samples into every batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import transforms
from .autodiff import (Tape, Tensor, add, backward, scale, sgd_momentum_step,
                       zero_grads)
from .checkpoint import save_tensors
from .errors import ConfigError, NumericError, ShapeError
from .losses import (LossBreakdown, RampUpSchedule, consistency_mse,
                     rampup_weight, supervised_ce, total_loss)
from .metrics import MetricScores, evaluate
from .network import (Perturb, PerturbStreams, SegNetConfig, forward,
                      infer_config, init_params)

MODES = ("supervised", "supervised_plus_reg", "semi")

METRICS_HEADER = ("epoch,iter,lr,lambda,loss_sup,loss_cons,loss_total,"
                  "val_ja,val_di,val_ac,val_se,val_sp")


def fmt_float(x) -> str:
    """Canonical CSV float formatting: shortest repr that round-trips."""
    return repr(float(x))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    lr0: float = 0.01
    momentum: float = 0.9
    lr_power: float = 0.9
    noise_sigma: float = 0.1
    dropout_rate: float = 0.3
    schedule: RampUpSchedule | None = None
    seed: int = 0
    labeled_per_batch: int | None = None
    mode: str = "semi"
    ce_pass: str = "b"
    augment: bool = True
    full_transform_group: bool = False
    net: SegNetConfig = field(default_factory=SegNetConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ce_pass not in ("a", "b"):
            raise ConfigError(f"ce_pass must be 'a' or 'b', got {self.ce_pass!r}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.labeled_per_batch is None:
            object.__setattr__(self, "labeled_per_batch", max(1, self.batch_size // 2))
        if not 1 <= self.labeled_per_batch <= self.batch_size:
            raise ConfigError(f"need 1 <= labeled_per_batch <= batch_size, got "
                              f"{self.labeled_per_batch} of {self.batch_size}")
        if self.schedule is None:
            # weight reaches its plateau after 80% of the run by default
            ramp = int(0.8 * self.epochs + 0.5)
            object.__setattr__(self, "schedule", RampUpSchedule(k=1.0, rampup_epochs=ramp))


@dataclass
class TrainState:
    params: dict
    velocity: dict
    epoch: int
    iteration: int
    total_iterations: int
    rng_batch: np.random.Generator
    rng_transform: np.random.Generator
    rng_noise: np.random.Generator
    rng_dropout: np.random.Generator
    net_config: SegNetConfig
    # ops actually consumed by each pass of the latest step, for invariant checks
    last_transforms_pass_a: tuple = ()
    last_transforms_pass_b: tuple = ()


@dataclass(frozen=True)
class Batch:
    images: np.ndarray        # (N, 1, H, W) float64
    labels: np.ndarray        # (N, H, W) int64; zeros on unlabeled slots
    labeled_mask: np.ndarray  # (N,) bool


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    iteration: int
    lr: float
    lam: float
    loss_sup: float
    loss_cons: float
    loss_total: float
    val: MetricScores

    def csv_row(self) -> str:
        cells = [str(self.epoch), str(self.iteration)]
        cells += [fmt_float(v) for v in (self.lr, self.lam, self.loss_sup,
                                         self.loss_cons, self.loss_total)]
        cells += [fmt_float(v) for v in self.val]
        return ",".join(cells)


def init_state(config: TrainConfig, total_iterations: int) -> TrainState:
    if total_iterations < 1:
        raise ConfigError(f"total_iterations must be >= 1, got {total_iterations}")
    init_ss, batch_ss, transform_ss, noise_ss, dropout_ss = \
        np.random.SeedSequence(config.seed).spawn(5)
    return TrainState(
        params=init_params(config.net, seed=init_ss),
        velocity={},
        epoch=0,
        iteration=0,
        total_iterations=total_iterations,
        rng_batch=np.random.default_rng(batch_ss),
        rng_transform=np.random.default_rng(transform_ss),
        rng_noise=np.random.default_rng(noise_ss),
        rng_dropout=np.random.default_rng(dropout_ss),
        net_config=config.net,
    )


def poly_lr(iteration: int, total_iterations: int, lr0: float, power: float) -> float:
    if total_iterations < 1:
        raise ConfigError(f"total_iterations must be >= 1, got {total_iterations}")
    if not 0 <= iteration < total_iterations:
        raise ConfigError(f"iteration {iteration} outside [0, {total_iterations})")
    return lr0 * (1.0 - iteration / total_iterations) ** power


def _uses_unlabeled(dataset, config: TrainConfig) -> bool:
    # semi mode with an empty unlabeled pool degrades to fully-labeled batches
    return config.mode == "semi" and len(dataset.unlabeled) > 0


def batches_per_epoch(dataset, config: TrainConfig) -> int:
    if not dataset.labeled:
        raise ShapeError("labeled pool is empty")
    pool = len(dataset.labeled)
    if _uses_unlabeled(dataset, config):
        pool += len(dataset.unlabeled)
    return math.ceil(pool / config.batch_size)


def _draw_indices(pool_size: int, count: int, rng: np.random.Generator) -> list:
    """``count`` indices from repeated reshuffled passes over the pool, so
    multiplicities stay within one of each other."""
    out = []
    while len(out) < count:
        out.extend(int(i) for i in rng.permutation(pool_size))
    return out[:count]


def make_batches(dataset, config: TrainConfig, epoch_rng: np.random.Generator) -> list:
    n_batches = batches_per_epoch(dataset, config)
    mixed = _uses_unlabeled(dataset, config)
    lpb = config.labeled_per_batch if mixed else config.batch_size
    upb = config.batch_size - lpb if mixed else 0

    lab_idx = _draw_indices(len(dataset.labeled), n_batches * lpb, epoch_rng)
    unl_idx = _draw_indices(len(dataset.unlabeled), n_batches * upb, epoch_rng) \
        if upb else []

    from .data import augment

    batches = []
    for b in range(n_batches):
        images, labels, labeled_mask = [], [], []
        for i in lab_idx[b * lpb : (b + 1) * lpb]:
            ex = dataset.labeled[i]
            image, mask = (augment(ex.image, ex.mask, epoch_rng) if config.augment
                           else (ex.image, ex.mask))
            images.append(image)
            labels.append(mask)
            labeled_mask.append(True)
        for i in unl_idx[b * upb : (b + 1) * upb]:
            ex = dataset.unlabeled[i]
            image, _ = (augment(ex.image, None, epoch_rng) if config.augment
                        else (ex.image, None))
            images.append(image)
            labels.append(np.zeros_like(images[-1], dtype=np.int64))
            labeled_mask.append(False)
        batches.append(Batch(
            images=np.stack(images)[:, None, :, :].astype(np.float64),
            labels=np.stack(labels).astype(np.int64),
            labeled_mask=np.array(labeled_mask, dtype=bool),
        ))
    return batches


def train_step(state: TrainState, batch: Batch, config: TrainConfig):
    """One SGD update; returns the mutated state and the loss breakdown."""
    lr = poly_lr(state.iteration, state.total_iterations, config.lr0, config.lr_power)
    with_consistency = config.mode in ("supervised_plus_reg", "semi")
    lam = rampup_weight(state.epoch, config.schedule) if with_consistency else 0.0
    perturb = Perturb(noise_sigma=config.noise_sigma, dropout_rate=config.dropout_rate)
    streams = PerturbStreams(state.rng_noise, state.rng_dropout)

    try:
        with Tape() as tape:
            x = Tensor(batch.images)
            if with_consistency:
                ops = transforms.sample_batch(state.rng_transform, x.data.shape[0],
                                              full_group=config.full_transform_group)
                labels_t = np.stack([transforms.apply(op, lbl)
                                     for op, lbl in zip(ops, batch.labels)])
                probs_a = forward(state.net_config, state.params, x,
                                  perturb, "train", streams)
                z = transforms.apply_batch(ops, probs_a)
                state.last_transforms_pass_a = tuple(ops)
                x_t = Tensor(transforms.apply_batch(ops, batch.images))
                probs_b = forward(state.net_config, state.params, x_t,
                                  perturb, "train", streams)
                state.last_transforms_pass_b = tuple(ops)
                ce_probs = z if config.ce_pass == "a" else probs_b
                sup = supervised_ce(ce_probs, labels_t, batch.labeled_mask)
                cons = consistency_mse(z, probs_b)
                objective = add(sup, scale(cons, lam))
                cons_value = cons.item()
            else:
                state.last_transforms_pass_a = ()
                state.last_transforms_pass_b = ()
                probs = forward(state.net_config, state.params, x,
                                perturb, "train", streams)
                sup = supervised_ce(probs, batch.labels, batch.labeled_mask)
                objective = sup
                cons_value = 0.0
            backward(objective, tape)
        breakdown = total_loss(sup.item(), cons_value, lam)
        grads = {name: p.grad for name, p in state.params.items()}
        sgd_momentum_step(state.params, grads, state.velocity, lr, config.momentum)
        zero_grads(state.params)
    except NumericError as err:
        raise NumericError(
            f"non-finite value at iteration {state.iteration} of "
            f"{state.total_iterations} (epoch {state.epoch}, seed {config.seed}, "
            f"mode {config.mode}): {err}") from err

    state.iteration += 1
    return state, breakdown


def train(dataset, config: TrainConfig, out_dir=None):
    """Full run over the dataset; returns (params, per-epoch records).

    When ``out_dir`` is given, writes ``metrics.csv`` plus ``ckpt_final.tcsm``
    and ``ckpt_best.tcsm`` (highest validation Jaccard, earliest epoch wins
    ties).
    """
    if dataset.image_size % (2 ** config.net.depth) != 0:
        raise ShapeError(f"image size {dataset.image_size} not divisible by "
                         f"2^{config.net.depth}")
    if not dataset.validation:
        raise ShapeError("validation pool is empty")
    per_epoch = batches_per_epoch(dataset, config)
    state = init_state(config, config.epochs * per_epoch)

    records = []
    best_ja = -1.0
    best_params = None
    for epoch in range(config.epochs):
        state.epoch = epoch
        sums = np.zeros(3)
        for batch in make_batches(dataset, config, state.rng_batch):
            state, breakdown = train_step(state, batch, config)
            sums += (breakdown.supervised, breakdown.consistency, breakdown.total)
        report = evaluate(state.params, dataset.validation, state.net_config)
        with_consistency = config.mode in ("supervised_plus_reg", "semi")
        records.append(EpochRecord(
            epoch=epoch,
            iteration=state.iteration,
            lr=poly_lr(state.iteration - 1, state.total_iterations,
                       config.lr0, config.lr_power),
            lam=rampup_weight(epoch, config.schedule) if with_consistency else 0.0,
            loss_sup=sums[0] / per_epoch,
            loss_cons=sums[1] / per_epoch,
            loss_total=sums[2] / per_epoch,
            val=MetricScores(report.ja, report.di, report.ac, report.se, report.sp),
        ))
        if report.ja > best_ja:
            best_ja = report.ja
            best_params = {name: p.data.copy() for name, p in state.params.items()}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", records)
        save_tensors(out_dir / "ckpt_final.tcsm", state.params)
        save_tensors(out_dir / "ckpt_best.tcsm", best_params)
    return state.params, records


def write_metrics_csv(path, records) -> None:
    lines = [METRICS_HEADER] + [record.csv_row() for record in records]
    Path(path).write_text("\n".join(lines) + "\n")


def predict(params, image, config: SegNetConfig | None = None) -> np.ndarray:
    """Eval-mode probability map (num_classes, H, W) for a single image."""
    net_config = config if config is not None else infer_config(params)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"predict expects a 2-d image, got shape {image.shape}")
    probs = forward(net_config, params, Tensor(image[None, None, :, :]), mode="eval")
    return probs.data[0].copy()
