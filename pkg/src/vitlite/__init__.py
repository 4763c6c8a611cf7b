"""Small Vision Transformers on numpy: masked pre-training, distillation and layer analysis."""

from .errors import (BadMagicError, CheckpointError, ChecksumError, ConfigError, ContractError,
                     DimensionError, TruncatedCheckpointError, UnknownTensorError,
                     VersionMismatchError)
from .mae import DecoderConfig, MAEModel, MaskPlan, generate_mask
from .tensor import Tensor, backward, no_grad
from .vit import ActivationTrace, ViT, ViTConfig

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace", "BadMagicError", "CheckpointError", "ChecksumError", "ConfigError",
    "ContractError", "DecoderConfig", "DimensionError", "MAEModel", "MaskPlan",
    "Tensor", "TruncatedCheckpointError", "UnknownTensorError", "VersionMismatchError",
    "ViT", "ViTConfig", "backward", "generate_mask", "no_grad",
]
