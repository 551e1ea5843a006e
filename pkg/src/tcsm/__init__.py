"""Semi-supervised image segmentation via transformation-consistent self-ensembling.

A desk-scale, fully deterministic stack: reverse-mode autodiff on numpy, a
small encoder-decoder segmentation network, dihedral transform consistency
training, synthetic data generation, and evaluation tooling.
"""

from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .data import (GenSpec, SemiDataset, augment, build_dataset, generate,
                   load_dataset, save_dataset, split)
from .errors import ConfigError, CorruptFileError, NumericError, ShapeError
from .losses import (LossBreakdown, RampUpSchedule, consistency_mse,
                     rampup_weight, supervised_ce, total_loss)
from .metrics import (ConfusionCounts, MetricReport, MetricScores, confusion,
                      evaluate, fill_holes, predict_mask, threshold)
from .network import Perturb, SegNetConfig, forward, infer_config, init_params
from .trainer import MODES, TrainConfig, predict, train
from .transforms import (SAMPLE_OPS, TransformOp, apply, apply_batch, compose,
                         inverse, sample, sample_batch)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CorruptFileError", "NumericError", "ShapeError",
    "Tensor",
    "TransformOp", "SAMPLE_OPS", "apply", "apply_batch", "compose", "inverse",
    "sample", "sample_batch",
    "LossBreakdown", "RampUpSchedule", "consistency_mse", "rampup_weight",
    "supervised_ce", "total_loss",
    "Perturb", "SegNetConfig", "forward", "infer_config", "init_params",
    "GenSpec", "SemiDataset", "augment", "build_dataset", "generate",
    "load_dataset", "save_dataset", "split",
    "ConfusionCounts", "MetricReport", "MetricScores", "confusion", "evaluate",
    "fill_holes", "predict_mask", "threshold",
    "MODES", "TrainConfig", "predict", "train",
    "load_tensors", "save_tensors",
    "__version__",
]
