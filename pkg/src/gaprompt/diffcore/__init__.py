"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from .functional import (
    add, broadcast_to, concat, cross_entropy, div, exp, forward_op, gather, gelu,
    getitem, layernorm, linear, log, log_softmax, matmul, max_reduce, mean_reduce, mul,
    power, reshape, scalar_scale, softmax, sqdist, sqrt, sub, sum_reduce, tanh, transpose,
)
from .gradcheck import grad_check, grad_check_params, relative_error
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import (
    Parameter, Tensor, as_tensor, backward, default_dtype, grad_enabled, no_grad,
    set_default_dtype,
)

__all__ = [
    "Tensor", "Parameter", "Module", "Linear", "LayerNorm", "MLP",
    "backward", "no_grad", "grad_enabled", "as_tensor", "default_dtype", "set_default_dtype",
    "grad_check", "grad_check_params", "relative_error", "forward_op",
    "add", "sub", "mul", "div", "scalar_scale", "power", "exp", "log", "sqdist", "sqrt", "tanh", "gelu",
    "matmul", "linear", "reshape", "transpose", "concat", "broadcast_to", "getitem", "gather",
    "sum_reduce", "mean_reduce", "max_reduce", "softmax", "log_softmax", "layernorm",
    "cross_entropy",
]
