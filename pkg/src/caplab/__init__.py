"""Contour-prior adversarial training for a small vision transformer, on numpy."""

from .estimator import CAPClassifier
from .guided_filter import FilterConfig, SelfGuidedFilter, self_guided_filter
from .trainer import TrainPlan, train
from .vit import VitConfig, VitModel

__version__ = "0.1.0"

__all__ = [
    "CAPClassifier",
    "FilterConfig",
    "SelfGuidedFilter",
    "TrainPlan",
    "VitConfig",
    "VitModel",
    "self_guided_filter",
    "train",
]
