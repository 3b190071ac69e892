"""Rank-aware multi-encoder fusion for blended emotion recognition."""

__version__ = "0.1.0"

from .decoding import AlignmentConfig, DecodedPrediction, decode, metrics
from .errors import BlendFuseError, DataError, NumericError
from .model import FusionModel, ModelConfig

__all__ = [
    "AlignmentConfig",
    "BlendFuseError",
    "DataError",
    "DecodedPrediction",
    "FusionModel",
    "ModelConfig",
    "NumericError",
    "__version__",
    "decode",
    "metrics",
]
