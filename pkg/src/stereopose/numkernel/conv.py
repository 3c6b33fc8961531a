"""3-D convolution by patch unfolding.

``unfold3d`` is the only primitive here (im2col with a col2im backward);
``conv3d`` is then a batched matmul, so its gradient is matmul's.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .tensor import Tensor, as_tensor, make_node


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def unfold3d(x, kernel, stride=1) -> tuple[Tensor, tuple[int, int, int]]:
    """Patches of an already padded ``C x D x H x W`` input.

    Returns ``C x (kd*kh*kw) x (D'*H'*W')``; the second axis is ordered like a
    flattened ``kd x kh x kw`` kernel.
    """
    x = as_tensor(x)
    kd, kh, kw = _triple(kernel)
    sd, sh, sw = _triple(stride)
    c, d, h, w = x.shape
    if kd > d or kh > h or kw > w:
        raise ValueError(f"kernel {(kd, kh, kw)} larger than padded input {(d, h, w)}")
    win = sliding_window_view(x.data, (kd, kh, kw), axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    od, oh, ow = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c, kd * kh * kw, od * oh * ow)

    def back(g):
        g = g.reshape(c, kd, kh, kw, od, oh, ow)
        full = np.zeros_like(x.data)
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    full[:, a:a + sd * (od - 1) + 1:sd,
                         b:b + sh * (oh - 1) + 1:sh,
                         e:e + sw * (ow - 1) + 1:sw] += g[:, a, b, e]
        return (full,)

    out = make_node(cols, (x,), back, "unfold3d")
    return out, (od, oh, ow)


def conv3d(x, kernel, bias=None, stride=1, pad=0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``C_in x D x H x W`` with ``C_out x C_in/g x kd x kh x kw``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"conv3d expects 4-D input and 5-D kernel, got {x.shape}, {kernel.shape}")
    c_in = x.shape[0]
    c_out, c_per, kd, kh, kw = kernel.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_per != c_in // groups:
        raise ValueError(f"kernel expects {c_per} channels per group, input gives {c_in // groups}")
    pd, ph, pw = _triple(pad)
    if min(pd, ph, pw) < 0:
        raise ValueError("negative padding")
    if pd or ph or pw:
        x = ops.pad(x, [(0, 0), (pd, pd), (ph, ph), (pw, pw)])
    cols, (od, oh, ow) = unfold3d(x, (kd, kh, kw), stride)
    taps = kd * kh * kw
    # cols: C_in x taps x L  ->  groups x (C_in/g * taps) x L
    cols = ops.reshape(cols, (groups, c_per * taps, od * oh * ow))
    kmat = ops.reshape(kernel, (groups, c_out // groups, c_per * taps))
    out = ops.reshape(ops.matmul(kmat, cols), (c_out, od, oh, ow))
    if bias is not None:
        out = out + ops.reshape(as_tensor(bias), (c_out, 1, 1, 1))
    return out


def same_pad(kernel_shape) -> tuple[int, int, int]:
    return tuple(k // 2 for k in kernel_shape)


def conv2d(x, kernel, bias=None, stride=1, pad=0, groups: int = 1) -> Tensor:
    """2-D convolution of ``C x H x W`` through ``conv3d`` with unit depth."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    x4 = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
    k5 = ops.reshape(kernel, kernel.shape[:2] + (1,) + kernel.shape[2:])
    out = conv3d(x4, k5, bias, stride=(1, sh, sw), pad=(0, ph, pw), groups=groups)
    return ops.reshape(out, (out.shape[0],) + out.shape[2:])


def conv_transpose3d(x, kernel, bias=None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed 3-D convolution, ``kernel`` shaped ``C_in x C_out x k x k x k``.

    Zero-dilates the input and cross-correlates with the flipped, channel
    swapped kernel. Output extent is ``(n - 1) * stride - 2 * pad + k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[2:]
    up = ops.dilate(x, stride, axes=(1, 2, 3))
    widths = [(0, 0)] + [(kk - 1 - pad, kk - 1 - pad) for kk in k]
    if min(w[0] for w in widths[1:]) < 0:
        raise ValueError("pad too large for kernel")
    up = ops.pad(up, widths)
    flipped = ops.getitem(kernel, (slice(None), slice(None), slice(None, None, -1),
                                   slice(None, None, -1), slice(None, None, -1)))
    return conv3d(up, ops.permute(flipped, (1, 0, 2, 3, 4)), bias)
