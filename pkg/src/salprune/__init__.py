"""Saliency-guided channel pruning for small visual detectors."""

__version__ = "0.1.0"

from .data import BBox, DetectionSample
from .detector import build_toy_detector, detection_loss, forward_with_taps
from .graph import ModelGraph
from .pruner import apply_plan, build_groups, make_plan
from .reweight import DecaySpec, build_reweight_mask
from .saliency import SaliencyConfig, channel_importance, channel_saliency, compute_importance

__all__ = [
    "BBox",
    "DetectionSample",
    "ModelGraph",
    "DecaySpec",
    "SaliencyConfig",
    "build_toy_detector",
    "detection_loss",
    "forward_with_taps",
    "build_reweight_mask",
    "channel_saliency",
    "channel_importance",
    "compute_importance",
    "build_groups",
    "make_plan",
    "apply_plan",
]
