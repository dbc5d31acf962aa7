"""Small reverse-mode autodiff engine on top of numpy."""

from .gradcheck import finite_difference_check
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNormState,
    batchnorm,
    conv1d,
    dropout,
    flatten,
    gradient_reversal,
    linear,
    maxpool1d,
    relu,
    reshape,
    scale_gradient,
    softmax,
    softmax_cross_entropy,
)
from .optim import SGD, MissingGradientError, sgd_step
from .tensor import DimensionError, Tensor

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "BatchNormState",
    "DimensionError",
    "MissingGradientError",
    "SGD",
    "Tensor",
    "batchnorm",
    "conv1d",
    "dropout",
    "finite_difference_check",
    "flatten",
    "gradient_reversal",
    "linear",
    "maxpool1d",
    "relu",
    "reshape",
    "scale_gradient",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
]
