"""Volumetric spine segmentation on a float64 numpy engine.

Multi-scale convolutional fusion in the stem, a Swin encoder whose window
attention carries a learned per-head gate, a U-Net decoder, and combined
cross-entropy + Dice training. See ``spineseg.cli`` for the command line.
"""
from .config import RunConfig, load_config, parse_config
from .fusion import FusionConfig
from .losses import MetricsReport, combined_loss, cross_entropy, dice_loss, segmentation_metrics
from .network import ModelConfig, SegmentationModel, ablate, init_model

__all__ = [
    "FusionConfig",
    "MetricsReport",
    "ModelConfig",
    "RunConfig",
    "SegmentationModel",
    "ablate",
    "combined_loss",
    "cross_entropy",
    "dice_loss",
    "init_model",
    "load_config",
    "parse_config",
    "segmentation_metrics",
]
