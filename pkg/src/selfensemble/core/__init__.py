"""Minimal tensors with reverse-mode differentiation."""

from .gradcheck import numerical_gradient, relative_error
from .ops import (
    add,
    concat,
    conv2d,
    fully_connected,
    global_average_pool,
    mse_loss,
    mul,
    relu,
    reshape,
    softmax_over_channels,
    sub,
    sum_,
)
from .optim import Adam, OptimizerState, optimizer_step
from .tensor import Parameter, Tensor, as_tensor, backward

__all__ = [
    "Adam", "OptimizerState", "Parameter", "Tensor", "add", "as_tensor", "backward",
    "concat", "conv2d", "fully_connected", "global_average_pool", "mse_loss", "mul",
    "numerical_gradient", "optimizer_step", "relative_error", "relu", "reshape",
    "softmax_over_channels", "sub", "sum_",
]
