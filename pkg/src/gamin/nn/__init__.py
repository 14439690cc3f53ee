"""Minimal feed-forward network engine (dense/conv/pool, Adam, container IO)."""

from .losses import LOG_EPS, cross_entropy, cross_entropy_grad, mean_absolute_error
from .model import AdamState, CombinedModel, EngineError, Model, glorot_uniform
from .serialize import ContainerError, from_bytes, load, save, to_bytes
from .spec import (ArchitectureSpec, LayerSpec, SpecError, conv2d, dense,
                   dropout, flatten, maxpool2d, reshape)

__all__ = [
    "LOG_EPS", "cross_entropy", "cross_entropy_grad", "mean_absolute_error",
    "AdamState", "CombinedModel", "EngineError", "Model", "glorot_uniform",
    "ContainerError", "from_bytes", "load", "save", "to_bytes",
    "ArchitectureSpec", "LayerSpec", "SpecError",
    "conv2d", "dense", "dropout", "flatten", "maxpool2d", "reshape",
]
