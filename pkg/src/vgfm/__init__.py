"""Prototype-guided pseudo-label mining and dual-level feature alignment
over serialized feature maps, with a synthetic-world self-training simulator.
"""

from .core import Box, FeatureMap, bilinear_sample, cosine_similarity, iou, roi_align, sigmoid, softmax
from .kernels import BACKEND
from .rng import Rng
from .store import (
    DatasetIndex,
    Detection,
    PrototypeSet,
    load_dataset,
    read_feature_map,
    read_prototypes,
    write_feature_map,
    write_prototypes,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Box",
    "DatasetIndex",
    "Detection",
    "FeatureMap",
    "PrototypeSet",
    "Rng",
    "bilinear_sample",
    "cosine_similarity",
    "iou",
    "load_dataset",
    "read_feature_map",
    "read_prototypes",
    "roi_align",
    "sigmoid",
    "softmax",
    "write_feature_map",
    "write_prototypes",
]
