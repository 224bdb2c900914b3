"""NucleiHVT and CB-NucleiHVT nuclei segmentation on a small numpy autodiff core."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .datapipe import AugmentPolicy, BatchStream, DataError, NormStats, Sample, load_dataset, synthetic_nuclei
from .losses import LossWeights, combined_loss
from .metrics import MetricsReport, classwise_report, render_error_map
from .models import ModelConfig, StageSpec, flop_estimate, forward, init_params, param_count
from .tensor import Tensor, no_grad
from .trainer import NonFiniteLossError, TrainConfig, evaluate, predict_mask, train

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "BatchStream",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "NonFiniteLossError",
    "NormStats",
    "RunConfig",
    "Sample",
    "StageSpec",
    "Tensor",
    "TrainConfig",
    "classwise_report",
    "combined_loss",
    "evaluate",
    "flop_estimate",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "no_grad",
    "param_count",
    "parse_config",
    "predict_mask",
    "render_error_map",
    "save_checkpoint",
    "synthetic_nuclei",
    "train",
]
