"""Single-image dehazing with a residual CNN and a global-context transformer,
built on a small numpy autograd engine."""

from .attention import EncoderConfig, dhformer_forward, init_model
from .backbone import ArchConfig
from .errors import (
    CheckpointMismatch,
    ConfigError,
    ContractError,
    DehazeError,
    DimensionError,
    DomainError,
    FormatError,
    NumericDomainError,
    TrainingDivergence,
)
from .metrics import MetricReport, fsim, psnr, ssim
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CheckpointMismatch",
    "ConfigError",
    "ContractError",
    "DehazeError",
    "DimensionError",
    "DomainError",
    "EncoderConfig",
    "FormatError",
    "MetricReport",
    "NumericDomainError",
    "TrainConfig",
    "TrainingDivergence",
    "dhformer_forward",
    "evaluate",
    "fsim",
    "init_model",
    "psnr",
    "ssim",
    "train",
]
