"""Numeric substrate: autodiff tensors, losses, SGD and gradient checking."""

from .gradcheck import analytic_grads, grad_check, numeric_grads
from .losses import cross_entropy
from .optim import SgdConfig, sgd_step
from .params import ParamSet, check_congruent, glorot_uniform, grads_of
from .tensor import (
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    l2_normalize,
    log_softmax,
    matmul,
    softmax,
    tensor,
)

__all__ = [
    "ParamSet",
    "SgdConfig",
    "Tensor",
    "analytic_grads",
    "avg_pool2d",
    "check_congruent",
    "concat",
    "conv2d",
    "cross_entropy",
    "glorot_uniform",
    "grad_check",
    "grads_of",
    "l2_normalize",
    "log_softmax",
    "matmul",
    "numeric_grads",
    "sgd_step",
    "softmax",
    "tensor",
]
