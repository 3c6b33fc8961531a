"""Minimal float64 tensor library with reverse-mode differentiation."""
from . import ops
from .conv import conv2d, conv3d, conv_transpose3d, unfold3d
from .layers import instance_norm, layer_norm, linear, param, zeros_param
from .ops import (
    concat, exp, log, matmul, mean, relu, reshape, sigmoid, silu, softmax, sqrt, stack, tanh,
)
from .optim import Adam, AdamState, adam_step, cyclic_lr
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step", "as_tensor", "backward", "concat", "conv2d",
    "conv3d", "conv_transpose3d", "cyclic_lr", "exp", "grad_enabled", "instance_norm",
    "layer_norm", "linear", "log", "matmul", "mean", "no_grad", "ops", "param", "relu",
    "reshape", "sigmoid", "silu", "softmax", "sqrt", "stack", "tanh", "unfold3d", "zeros_param",
]
