"""Attribution-driven knowledge distillation on a small numpy transformer."""

from .model import Model, ModelConfig
from .distill import DistillConfig, LossBreakdown
from .trainer import OptimConfig, TrainReport

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "DistillConfig", "LossBreakdown", "OptimConfig", "TrainReport"]
