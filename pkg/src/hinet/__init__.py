"""Hybrid-fusion network for synthesizing a missing MRI modality from two others."""
from .errors import ConfigError, DataError, FormatError, HiNetError, NumericError
from .model import HiNet, ModelConfig, init_params
from .train import Trainer, TrainConfig, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "FormatError", "HiNetError", "NumericError",
    "HiNet", "ModelConfig", "init_params", "Trainer", "TrainConfig", "lr_schedule",
]
