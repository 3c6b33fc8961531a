"""Attention blocks used by the stereo network and the RGB/point fusion.

Parameters are plain ``dict[str, Tensor]``; every ``init_*`` function takes a
numpy ``Generator`` so initialisation is reproducible.

Layout conventions:
  * Triplet attention works on ``C x H x W`` maps.
  * ECA / SECA work on ``C x D x H x W`` volumes.
  * ECAA / GFFN / AugSC / ECFT work on token matrices ``n x d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkernel import ops
from .numkernel.conv import conv2d, conv3d
from .numkernel.layers import instance_norm, layer_norm, param, zeros_param
from .numkernel.tensor import Tensor, as_tensor

TA_KERNEL = 7


# ---------------------------------------------------------------- triplet attention

def zpool(x, axis: int) -> Tensor:
    """[max, mean] along ``axis``, stacked in place of that axis (extent 2)."""
    x = as_tensor(x)
    return ops.concat([ops.max(x, axis, keepdims=True), ops.mean(x, axis, keepdims=True)], axis=axis)


def init_triplet(rng: np.random.Generator, k: int = TA_KERNEL) -> dict[str, Tensor]:
    if k % 2 == 0:
        raise ValueError("triplet attention kernel must be odd")
    return {name: param(rng, (1, 2, k, k)) for name in ("ch", "cw", "hw")}


# branch name -> axis pooled away on a C x H x W map
_TA_BRANCHES = {"ch": 2, "cw": 1, "hw": 0}


def _ta_branch(x: Tensor, kernel: Tensor, axis: int) -> Tensor:
    z = zpool(x, axis)
    order = (axis,) + tuple(a for a in range(3) if a != axis)
    z = ops.permute(z, order)                                  # 2 x A x B
    k = kernel.shape[-1]
    gate = ops.sigmoid(conv2d(z, kernel, pad=k // 2))          # 1 x A x B
    gate = ops.permute(gate, tuple(np.argsort(order)))         # back to C x H x W with a unit axis
    return x * gate


def triplet_attention(F, params: dict[str, Tensor]) -> Tensor:
    """Average of three gated branches covering the (C,H), (C,W) and (H,W) planes."""
    F = as_tensor(F)
    if F.ndim != 3:
        raise ValueError(f"triplet attention expects C x H x W, got {F.shape}")
    ys = [_ta_branch(F, params[name], axis) for name, axis in _TA_BRANCHES.items()]
    return (ys[0] + ys[1] + ys[2]) * (1.0 / 3.0)


# ---------------------------------------------------------------- ECA / SECA

def eca_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    t = int(abs((math.log2(channels) + b) / gamma))
    return t if t % 2 else t + 1


def channel_conv1d(v: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 'same' 1-D cross-correlation of a length-C vector."""
    k = w.shape[0]
    c = v.shape[0]
    padded = ops.pad(v, [(k // 2, k // 2)])
    out = None
    for j in range(k):
        term = padded[j:j + c] * w[j]
        out = term if out is None else out + term
    return out


def eca(X, w: Tensor) -> Tensor:
    """Channel gate from a 1-D conv over the globally pooled channel descriptor."""
    X = as_tensor(X)
    c = X.shape[0]
    pooled = ops.mean(ops.reshape(X, (c, -1)), axis=1)
    gate = ops.sigmoid(channel_conv1d(pooled, w))
    return X * ops.reshape(gate, (c,) + (1,) * (X.ndim - 1))


def init_seca(rng: np.random.Generator, c_in: int, c_out: int | None = None,
              c_branch: int | None = None) -> dict[str, Tensor]:
    c_out = c_in if c_out is None else c_out
    c_branch = c_in if c_branch is None else c_branch
    k = eca_kernel_size(c_in)
    return {
        "eca": param(rng, (k,), scale=1.0 / k),
        "q_w": param(rng, (c_branch, c_in, 3, 3, 3)), "q_b": zeros_param((c_branch,)),
        "k_w": param(rng, (c_branch, c_in, 5, 5, 5)), "k_b": zeros_param((c_branch,)),
        "v_w": param(rng, (c_branch, c_in, 1, 1, 1)), "v_b": zeros_param((c_branch,)),
        "f_w": param(rng, (c_out, c_branch + c_in, 1, 1, 1)), "f_b": zeros_param((c_out,)),
    }


def seca(X, params: dict[str, Tensor], return_weights: bool = False):
    """Spatial + efficient channel attention on a ``C x D x H x W`` volume.

    The q/k/v branches (3^3, 5^3, 1^3 kernels) are same-padded so every
    branch keeps X's spatial shape. Softmax runs over all D*H*W positions of
    each channel independently.
    """
    X = as_tensor(X)
    if X.ndim != 4:
        raise ValueError(f"SECA expects C x D x H x W, got {X.shape}")
    x_eca = eca(X, params["eca"])
    xq = ops.relu(conv3d(X, params["q_w"], params["q_b"], pad=1))
    xk = ops.relu(conv3d(X, params["k_w"], params["k_b"], pad=2))
    xv = ops.relu(conv3d(X, params["v_w"], params["v_b"]))
    u = xq * xk
    cb = u.shape[0]
    weights = ops.reshape(ops.softmax(ops.reshape(u, (cb, -1)), axis=1), u.shape)
    x_attn = weights * xv
    fused = instance_norm(ops.concat([x_attn, x_eca], axis=0))
    v = ops.relu(conv3d(fused, params["f_w"], params["f_b"]))
    return (v, weights) if return_weights else v


# ---------------------------------------------------------------- ECAA / GFFN / AugSC

@dataclass(frozen=True)
class ECAAOptions:
    softmax_weights: bool = True     # normalise token weights before pooling
    query_norm: str = "l2"           # "l2" (row-wise) or "layer"


def init_ecaa(rng: np.random.Generator, d: int) -> dict[str, Tensor]:
    return {
        "w_q": param(rng, (d, d)), "w_k": param(rng, (d, d)),
        "l_g": param(rng, (d,)),
        "t_w": param(rng, (d, d)), "t_b": zeros_param((d,)),
    }


def _normalize_rows(Q: Tensor, mode: str) -> Tensor:
    if mode == "l2":
        return Q / ops.sqrt(ops.sum(Q * Q, axis=1, keepdims=True) + 1e-12)
    if mode == "layer":
        return layer_norm(Q, axis=1)
    raise ValueError(f"unknown query normalisation {mode!r}")


def ecaa(F_src, F_tgt, params: dict[str, Tensor], options: ECAAOptions = ECAAOptions(),
         return_weights: bool = False):
    """Additive cross-modal attention, linear in the token count.

    Queries come from ``F_tgt`` (the modality being enriched), keys from
    ``F_src``. One global query vector is pooled from the token-weighted
    queries and broadcast against every key row.
    """
    F_src, F_tgt = as_tensor(F_src), as_tensor(F_tgt)
    if F_src.shape != F_tgt.shape:
        raise ValueError(f"paired token sets differ: {F_src.shape} vs {F_tgt.shape}")
    n, d = F_tgt.shape
    if n == 0:
        raise ValueError("ECAA needs at least one token")
    Q = ops.matmul(F_tgt, params["w_q"])
    K = ops.matmul(F_src, params["w_k"])
    scores = ops.matmul(Q, ops.reshape(params["l_g"], (d, 1))) * (1.0 / math.sqrt(d))   # n x 1
    g = ops.softmax(scores, axis=0) if options.softmax_weights else scores
    q = ops.sum(g * Q, axis=0, keepdims=True)                                            # 1 x d
    x_hat = _normalize_rows(Q, options.query_norm) + linear_t(K * q, params)
    return (x_hat, g) if return_weights else x_hat


def linear_t(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ops.matmul(x, params["t_w"]) + params["t_b"]


def init_gffn(rng: np.random.Generator, d: int, hidden: int | None = None) -> dict[str, Tensor]:
    hidden = 2 * d if hidden is None else hidden
    return {
        "u_w": param(rng, (2 * d, hidden)), "u_b": zeros_param((hidden,)),
        "v_w": param(rng, (2 * d, hidden)), "v_b": zeros_param((hidden,)),
        "w_w": param(rng, (hidden, d)), "w_b": zeros_param((d,)),
        "ln_w": Tensor(np.ones(d), requires_grad=True), "ln_b": zeros_param((d,)),
    }


def gffn(x_hat, F_res, params: dict[str, Tensor], t_params: dict[str, Tensor]) -> Tensor:
    """SwiGLU feed-forward over ``[T(x_hat) || F_res]`` followed by layer norm.

    ``t_params`` supplies the linear map T shared with the ECAA of the same
    direction.
    """
    x_hat, F_res = as_tensor(x_hat), as_tensor(F_res)
    cat = ops.concat([linear_t(x_hat, t_params), F_res], axis=1)
    if cat.shape[1] != params["u_w"].shape[0]:
        raise ValueError(f"concat width {cat.shape[1]} does not match gate input {params['u_w'].shape[0]}")
    gate = ops.silu(ops.matmul(cat, params["u_w"]) + params["u_b"])
    lin = ops.matmul(cat, params["v_w"]) + params["v_b"]
    out = ops.matmul(gate * lin, params["w_w"]) + params["w_b"]
    return layer_norm(out, axis=1, weight=params["ln_w"], bias=params["ln_b"])


def augsc(F, W, b) -> Tensor:
    """Learned affine shortcut followed by (non-affine) layer norm."""
    F = as_tensor(F)
    return layer_norm(ops.matmul(F, W) + b, axis=1)


# ---------------------------------------------------------------- ECFT

@dataclass(frozen=True)
class FusionDirections:
    rgb_to_point: bool = True        # enrich point features with RGB context
    point_to_rgb: bool = True        # enrich RGB features with point context

    def __post_init__(self):
        if not (self.rgb_to_point or self.point_to_rgb):
            raise ValueError("at least one fusion direction must be enabled")

    @property
    def label(self) -> str:
        if self.rgb_to_point and self.point_to_rgb:
            return "both"
        return "rgb_to_point" if self.rgb_to_point else "point_to_rgb"

    @classmethod
    def from_label(cls, label: str) -> "FusionDirections":
        table = {"rgb_to_point": cls(True, False), "point_to_rgb": cls(False, True), "both": cls(True, True)}
        if label not in table:
            raise ValueError(f"unknown fusion direction {label!r}")
        return table[label]


FUSION_CONFIGS = ("rgb_to_point", "point_to_rgb", "both")


def init_ecft(rng: np.random.Generator, d: int, hidden: int | None = None) -> dict[str, dict[str, Tensor]]:
    """Parameter groups: ``pr`` enriches RGB from points, ``rp`` enriches points from RGB."""
    params = {
        "ecaa_pr": init_ecaa(rng, d), "gffn_r": init_gffn(rng, d, hidden),
        "ecaa_rp": init_ecaa(rng, d), "gffn_p": init_gffn(rng, d, hidden),
    }
    for m in ("r", "p"):
        params[f"aug_{m}"] = {"w": param(rng, (d, d)), "b": zeros_param((d,))}
    return params


def ecft(F_p, F_r, params, directions: FusionDirections = FusionDirections(),
         options: ECAAOptions = ECAAOptions()) -> tuple[Tensor, Tensor]:
    """Bidirectional fusion; a disabled direction keeps only AugSC(F) + F."""
    F_p, F_r = as_tensor(F_p), as_tensor(F_r)
    if F_p.shape != F_r.shape:
        raise ValueError(f"point and RGB token sets differ: {F_p.shape} vs {F_r.shape}")
    out_r = augsc(F_r, params["aug_r"]["w"], params["aug_r"]["b"]) + F_r
    out_p = augsc(F_p, params["aug_p"]["w"], params["aug_p"]["b"]) + F_p
    if directions.point_to_rgb:
        x_r = ecaa(F_p, F_r, params["ecaa_pr"], options)
        out_r = out_r + gffn(x_r, F_r, params["gffn_r"], params["ecaa_pr"])
    if directions.rgb_to_point:
        x_p = ecaa(F_r, F_p, params["ecaa_rp"], options)
        out_p = out_p + gffn(x_p, F_p, params["gffn_p"], params["ecaa_rp"])
    return out_p, out_r


# ---------------------------------------------------------------- baseline and cost model

def vanilla_attention(Q, K, V) -> Tensor:
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    d = Q.shape[-1]
    scores = ops.matmul(Q, ops.permute(K, (1, 0))) * (1.0 / math.sqrt(d))
    return ops.matmul(ops.softmax(scores, axis=1), V)


def init_vanilla_block(rng: np.random.Generator, d: int) -> dict[str, Tensor]:
    return {name: param(rng, (d, d)) for name in ("w_q", "w_k", "w_v", "w_o")}


def vanilla_block(F_src, F_tgt, params: dict[str, Tensor]) -> Tensor:
    """Cross attention with Q/K/V/output projections, the quadratic reference."""
    Q = ops.matmul(as_tensor(F_tgt), params["w_q"])
    K = ops.matmul(as_tensor(F_src), params["w_k"])
    V = ops.matmul(as_tensor(F_src), params["w_v"])
    return ops.matmul(vanilla_attention(Q, K, V), params["w_o"])


def flop_count(mechanism: str, n: int, d: int) -> int:
    """Multiply-add count of one attention block on ``n`` tokens of width ``d``.

    vanilla: Q, K, V and output projections (4 n d^2), scores Q K^T (n^2 d),
    softmax (n^2), weights @ V (n^2 d).
    ecaa: Q, K and T projections (3 n d^2), token scores (n d), softmax (n),
    pooling (n d), key-query product (n d), row normalisation (2 n d).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if mechanism == "vanilla":
        return 4 * n * d * d + 2 * n * n * d + n * n
    if mechanism == "ecaa":
        return 3 * n * d * d + 5 * n * d + n
    raise ValueError(f"unknown mechanism {mechanism!r}")
