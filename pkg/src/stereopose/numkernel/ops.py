"""Differentiable primitives over :class:`Tensor`.

Broadcasting follows numpy; gradients are summed back to each operand's
shape. Composite layers (norms, conv) are built from these in layers.py and
conv.py so their gradients come for free.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_node

LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return make_node(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return make_node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return make_node(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """np.matmul semantics, including batched leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), back, "matmul")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _check_nonempty(a: Tensor, axes: tuple) -> None:
    for ax in axes:
        if a.shape[ax] == 0:
            raise ValueError(f"reduction over empty axis {ax}")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axes, keepdims) * (1.0 / count)


def max(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    _check_nonempty(a, (axis,))
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return make_node(out if keepdims else np.squeeze(out, axis), (a,), back, "max")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    _check_nonempty(a, (axis,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), back, "softmax")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), back, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_node(np.pad(a.data, widths), (a,), lambda g: (g[inner],), "pad")


def dilate(a, stride: int, axes) -> Tensor:
    """Insert ``stride - 1`` zeros between neighbours along ``axes``."""
    a = as_tensor(a)
    shape = list(a.shape)
    index = [slice(None)] * a.ndim
    for ax in axes:
        shape[ax] = (a.shape[ax] - 1) * stride + 1
        index[ax] = slice(None, None, stride)
    index = tuple(index)
    out = np.zeros(shape)
    out[index] = a.data
    return make_node(out, (a,), lambda g: (g[index].copy(),), "dilate")


def where(mask, a, b) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return make_node(np.where(mask, a.data, b.data), (a, b), back, "where")


def gather_linear(volume, positions, axis: int) -> Tensor:
    """Linearly interpolate ``volume`` at fractional ``positions`` along ``axis``.

    ``positions`` is a plain array broadcastable against ``volume`` with the
    interpolation axis replaced by the number of samples. Samples outside
    [0, extent - 1] read zero. Gradient flows to ``volume`` only.
    """
    volume = as_tensor(volume)
    axis = axis % volume.ndim
    pos = np.asarray(positions, dtype=np.float64)
    extent = volume.shape[axis]
    target = list(volume.shape)
    target[axis] = pos.shape[axis]
    pos = np.broadcast_to(pos, target)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64)
    hi = lo + 1
    w_lo = np.where((lo >= 0) & (lo < extent), 1.0 - frac, 0.0)
    w_hi = np.where((hi >= 0) & (hi < extent), frac, 0.0)
    lo_c = np.clip(lo, 0, extent - 1)
    hi_c = np.clip(hi, 0, extent - 1)
    out = (np.take_along_axis(volume.data, lo_c, axis) * w_lo
           + np.take_along_axis(volume.data, hi_c, axis) * w_hi)

    def back(g):
        full = np.zeros_like(volume.data)
        _scatter_add(full, lo_c, g * w_lo, axis)
        _scatter_add(full, hi_c, g * w_hi, axis)
        return (full,)

    return make_node(out, (volume,), back, "gather_linear")


def _scatter_add(dst: np.ndarray, idx: np.ndarray, vals: np.ndarray, axis: int) -> None:
    grids = list(np.indices(idx.shape, sparse=True))
    grids[axis] = idx
    np.add.at(dst, tuple(grids), vals)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)



def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def back(g):
        safe = np.expand_dims(np.where(out > 0, out, 1.0), axis)
        scale = np.expand_dims(np.where(out > 0, g, 0.0), axis)
        return (a.data / safe * scale,)

    return make_node(out, (a,), back, "norm")
