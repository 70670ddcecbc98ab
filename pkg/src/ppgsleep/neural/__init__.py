"""Minimal reverse-mode tensor engine: exactly the operations the stagers
need, in 64-bit floats for tight finite-difference checks."""

from .tensor import Tensor, no_grad, is_grad_enabled, NoTape, ShapeMismatch
from .ops import (
    BatchTooSmall,
    EmptyMask,
    conv1d,
    maxpool1d,
    batchnorm_train,
    batchnorm_eval,
    dropout,
    softmax,
    masked_cross_entropy,
    dsu_forward,
)
from .layers import (
    RunContext,
    Layer,
    Conv1D,
    BatchNorm,
    ReLU,
    MaxPool,
    Dropout,
    Dense,
    Dsu,
    Softmax,
)
from .optim import Adam
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "NoTape", "ShapeMismatch",
    "BatchTooSmall", "EmptyMask",
    "conv1d", "maxpool1d", "batchnorm_train", "batchnorm_eval", "dropout",
    "softmax", "masked_cross_entropy", "dsu_forward",
    "RunContext", "Layer", "Conv1D", "BatchNorm", "ReLU", "MaxPool",
    "Dropout", "Dense", "Dsu", "Softmax",
    "Adam", "save_checkpoint", "load_checkpoint",
]
