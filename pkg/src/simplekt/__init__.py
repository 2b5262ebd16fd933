"""Attention-based knowledge tracing with a from-scratch autodiff core."""

from .model import ModelConfig, SimpleKT
from .train import TrainConfig, cross_validate, train_fold

__all__ = ["ModelConfig", "SimpleKT", "TrainConfig", "cross_validate", "train_fold"]
__version__ = "0.1.0"
