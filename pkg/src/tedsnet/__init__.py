"""Topology-preserving segmentation by diffeomorphic warping of an annulus prior."""

from ._kernels import backend
from .config import ConfigError, DatasetConfig, ModelConfig, RunConfig
from .ndtensor import DimensionError, Tensor, no_grad

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "DimensionError",
    "ModelConfig",
    "RunConfig",
    "Tensor",
    "backend",
    "no_grad",
]
__version__ = "0.1.0"
