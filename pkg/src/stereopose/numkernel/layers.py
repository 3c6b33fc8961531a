from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

EPS = 1e-5


def layer_norm(x, axis: int = -1, weight=None, bias=None, eps: float = EPS) -> Tensor:
    """Zero-mean, unit-variance along ``axis`` (biased variance, eps inside the root)."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = ops.mean(x, axis, keepdims=True)
    xc = x - mu
    var = ops.mean(xc * xc, axis, keepdims=True)
    out = xc / ops.sqrt(var + eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def instance_norm(x, eps: float = EPS) -> Tensor:
    """Normalise each channel of a ``C x ...`` map over its spatial extent."""
    x = as_tensor(x)
    c = x.shape[0]
    flat = ops.reshape(x, (c, -1))
    return ops.reshape(layer_norm(flat, axis=1, eps=eps), x.shape)


def linear(x, weight, bias=None) -> Tensor:
    out = ops.matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    """Trainable tensor with fan-in scaled normal init."""
    shape = tuple(shape)
    if scale is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    """Nested dicts of tensors -> flat ``{"a.b": tensor}`` sharing the same objects."""
    if isinstance(tree, Tensor):
        return {prefix: tree}
    out = {}
    for key in sorted(tree):
        name = f"{prefix}.{key}" if prefix else str(key)
        out.update(flatten_params(tree[key], name))
    return out
