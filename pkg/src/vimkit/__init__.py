"""Desk-scale vector-quantized image modeling.

A numpy reverse-mode autodiff core, a ViT image codec with a factorized,
l2-normalized codebook, an autoregressive token prior, and the training,
data and command-line plumbing around them.
"""

from .codec import CodecConfig
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    IndexRangeError,
    MagicError,
    MaxvalError,
    NumericError,
    SamplingError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .prior import PriorConfig, TokenGrid
from .quantizer import QuantizerConfig
from .tensor import Tensor, no_grad
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "CodecConfig",
    "ConfigError",
    "FormatError",
    "IndexRangeError",
    "MagicError",
    "MaxvalError",
    "NumericError",
    "PriorConfig",
    "QuantizerConfig",
    "SamplingError",
    "ShapeError",
    "Tensor",
    "TokenGrid",
    "TrainConfig",
    "TruncatedError",
    "VersionError",
    "no_grad",
]
