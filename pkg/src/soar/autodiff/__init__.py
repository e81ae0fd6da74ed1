"""Minimal reverse-mode autodiff over numpy arrays."""
from .tensor import (
    Tensor, add, as_tensor, concat, div, exp, get_dtype, getitem, grad_enabled, log,
    matmul, maximum, mean, mul, no_grad, precision, relu, reshape, scale, set_check_finite,
    set_dtype, sqrt, square, stack, sub, sum_, take, transpose,
)
from .functional import (
    BatchNormState, batch_norm, conv2d, cosine_similarity, drop_path, hardswish, layer_norm,
    linear, log_softmax, softmax,
)
from .gradcheck import grad_check, numeric_grad

__all__ = [
    "Tensor", "add", "as_tensor", "concat", "div", "exp", "get_dtype", "getitem", "grad_enabled",
    "log", "matmul", "maximum", "mean", "mul", "no_grad", "precision", "relu", "reshape", "scale",
    "set_check_finite", "set_dtype", "sqrt", "square", "stack", "sub", "sum_", "take", "transpose",
    "BatchNormState", "batch_norm", "conv2d", "cosine_similarity", "drop_path", "hardswish",
    "layer_norm", "linear", "log_softmax", "softmax", "grad_check", "numeric_grad",
]
