"""Synthetic UAV panicle tiles from label maps, and detection/counting evaluation."""

from .data_model import Box, DatasetManifest, ImageTile, LabelMap, boxes_to_labelmap, labelmap_to_boxes
from .evaluation import Detection, EvalReport, counting_metrics, evaluate
from .sampler import BoxDistribution, SamplerConfig, fit_distribution, sample_labelmap

__all__ = [
    "Box",
    "BoxDistribution",
    "DatasetManifest",
    "Detection",
    "EvalReport",
    "ImageTile",
    "LabelMap",
    "SamplerConfig",
    "boxes_to_labelmap",
    "counting_metrics",
    "evaluate",
    "fit_distribution",
    "labelmap_to_boxes",
    "sample_labelmap",
]

__version__ = "0.1.0"
