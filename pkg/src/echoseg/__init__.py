"""Multiview segmentation with a missing-label-robust exponential-logarithmic loss."""

__version__ = "0.1.0"

from echoseg.dataset import TAXONOMY, VIEWS, LabelTaxonomy, Sample, presence
from echoseg.losses import LossConfig, total_loss
from echoseg.network import NetworkConfig, build
from echoseg.optimsched import ScheduleConfig, lr_at

__all__ = [
    "TAXONOMY",
    "VIEWS",
    "LabelTaxonomy",
    "Sample",
    "presence",
    "LossConfig",
    "total_loss",
    "NetworkConfig",
    "build",
    "ScheduleConfig",
    "lr_at",
    "__version__",
]
