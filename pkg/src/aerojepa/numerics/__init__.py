"""Deterministic float64 array engine with reverse-mode differentiation."""

from .tensor import (
    Tensor, add, as_tensor, broadcast_to, concat, cos, div, exp, gather_rows, gelu, getitem,
    grad_enabled, layer_norm, log, log_softmax, matmul, max_, maximum, mean, mul, neg, no_grad,
    power, relu, reshape, sin, softmax, softplus, sqrt, stack, sub, sum_, tanh, transpose,
)
from .optim import AdamW, OptimizerState, clip_by_global_norm, optimizer_step, warmup_cosine_lr
from .gradcheck import check_gradients, numeric_grad, relative_error

__all__ = [
    "Tensor", "add", "as_tensor", "broadcast_to", "concat", "cos", "div", "exp", "gather_rows",
    "gelu", "getitem", "grad_enabled", "layer_norm", "log", "log_softmax", "matmul", "max_",
    "maximum", "mean", "mul", "neg", "no_grad", "power", "relu", "reshape", "sin", "softmax",
    "softplus", "sqrt", "stack", "sub", "sum_", "tanh", "transpose",
    "AdamW", "OptimizerState", "clip_by_global_norm", "optimizer_step", "warmup_cosine_lr",
    "check_gradients", "numeric_grad", "relative_error",
]
