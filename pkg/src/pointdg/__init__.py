"""Domain-generalizable point-cloud classification with selective state-space models."""

from .autodiff import Tensor, apply_primitive, backward, finite_difference_check, no_grad
from .config import TrainConfig
from .model import PointSsmClassifier, build_model

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TrainConfig",
    "PointSsmClassifier",
    "apply_primitive",
    "backward",
    "build_model",
    "finite_difference_check",
    "no_grad",
]
