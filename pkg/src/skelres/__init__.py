"""Skeleton-sequence color encoding and residual-network action recognition."""

from .encoding import augment_set, encode_image, normalize, resize
from .network import NetworkSpec, build, count_parameters, load, save
from .skeleton_io import Protocol, SkeletonSequence, Topology, parse_sequence
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec",
    "Protocol",
    "SkeletonSequence",
    "Topology",
    "TrainConfig",
    "augment_set",
    "build",
    "count_parameters",
    "encode_image",
    "evaluate",
    "load",
    "normalize",
    "parse_sequence",
    "resize",
    "save",
    "train",
]
