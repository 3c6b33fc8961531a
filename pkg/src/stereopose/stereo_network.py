"""Desk-scale iterative stereo network with triplet and SECA attention.

Pipeline (single image pair, no batch axis):

    feature_net(left/right) --> correlation_volume --> regularize --> soft_argmax
    context_net(left) -> {T1, T2, T3} -> GRU hidden init + per-step injection
    K x (lookup -> motion encoder -> 3-level ConvGRU -> disparity residual)
    bilinear x4 upsampling of every iterate

Disparities inside the network are in feature-resolution pixels (1/4 of the
input); the returned iterates are rescaled to input pixels.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention
from .evalmetrics import epe
from .numkernel import ops
from .numkernel.conv import conv2d, conv3d, conv_transpose3d
from .numkernel.layers import flatten_params, param, zeros_param
from .numkernel.optim import Adam, cyclic_lr
from .numkernel.tensor import Tensor, as_tensor, backward, no_grad

FEATURE_SCALE = 4


@dataclass(frozen=True)
class TSCAConfig:
    channels: int = 8           # full scale: 128 context channels
    d_max: int = 16             # disparity bins at feature resolution
    iters: int = 4              # GRU updates; full scale: 22
    use_ta: bool = True
    use_seca: bool = True
    corr_radius: int = 3
    corr_groups: int = 1
    ta_kernel: int = attention.TA_KERNEL
    in_channels: int = 3
    gamma: float = 0.9          # sequence-loss decay

    def __post_init__(self):
        if self.d_max < 1 or self.iters < 1 or self.channels < 2:
            raise ValueError("need d_max >= 1, iters >= 1, channels >= 2")
        if self.corr_groups < 1 or self.channels % self.corr_groups:
            raise ValueError("correlation groups must divide the channel count")

    @property
    def max_disparity(self) -> float:
        """Largest representable disparity in input pixels."""
        return float(FEATURE_SCALE * (self.d_max - 1))


PAPER_SCALE = dict(channels=128, iters=22)


# ---------------------------------------------------------------- helpers

def _conv(rng, c_out, c_in, k=3):
    return {"w": param(rng, (c_out, c_in, k, k)), "b": zeros_param((c_out,))}


def _apply2d(x, p, stride=1, act=True):
    k = p["w"].shape[-1]
    y = conv2d(x, p["w"], p["b"], stride=stride, pad=k // 2)
    return ops.relu(y) if act else y


def avg_pool2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return ops.mean(ops.reshape(x, (c, h // 2, 2, w // 2, 2)), axis=(2, 4))


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear resampling matrix with half-pixel centres and edge clamping."""
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _, h, w = x.shape
    a_h = Tensor(interp_matrix(out_h, h))
    a_w = Tensor(interp_matrix(out_w, w).T)
    return ops.matmul(ops.matmul(a_h, x), a_w)


def to_chw(image: np.ndarray) -> Tensor:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    else:
        img = img.transpose(2, 0, 1)
    return Tensor(img - 0.5)


# ---------------------------------------------------------------- feature and context nets

def init_feature_net(rng, cfg: TSCAConfig) -> dict:
    c = cfg.channels
    return {"c1": _conv(rng, c, cfg.in_channels), "c2": _conv(rng, c, c),
            "c3": _conv(rng, c, c), "c4": _conv(rng, c, c)}


def feature_net(image: Tensor, p: dict) -> Tensor:
    """Four-layer strided conv stack down to 1/4 resolution."""
    x = _apply2d(image, p["c1"], stride=2)
    x = _apply2d(x, p["c2"], stride=2)
    x = _apply2d(x, p["c3"])
    return _apply2d(x, p["c4"], act=False)


def init_context_net(rng, cfg: TSCAConfig) -> dict:
    c = cfg.channels
    p = {"stem": _conv(rng, c, cfg.in_channels)}
    for i in (1, 2, 3):
        p[f"down{i}"] = _conv(rng, c, c)
        p[f"res{i}"] = {"a": _conv(rng, c, c), "b": _conv(rng, c, c)}
        p[f"ta{i}"] = attention.init_triplet(rng, cfg.ta_kernel)
    return p


def residual_block(x: Tensor, p: dict) -> Tensor:
    y = _apply2d(x, p["a"])
    y = _apply2d(y, p["b"], act=False)
    return ops.relu(x + y)


def context_net(image, cfg: TSCAConfig, p: dict) -> list[Tensor]:
    """Context features at 1/4, 1/8 and 1/16 resolution."""
    image = as_tensor(image)
    _, h, w = image.shape
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    x = _apply2d(image, p["stem"], stride=2)
    outs = []
    for i in (1, 2, 3):
        x = residual_block(_apply2d(x, p[f"down{i}"], stride=2), p[f"res{i}"])
        t = attention.triplet_attention(x, p[f"ta{i}"]) if cfg.use_ta else x
        outs.append(t)
        x = t
    return outs


# ---------------------------------------------------------------- cost volume

def correlation_volume(f_left, f_right, d_max: int, groups: int = 1) -> Tensor:
    """Cosine similarity of left(u) and right(u - d) per channel group.

    Returns ``groups x d_max x H x W``; lookups that fall off the right
    image's left edge read zero.
    """
    f_left, f_right = as_tensor(f_left), as_tensor(f_right)
    if f_left.shape != f_right.shape:
        raise ValueError("left and right features differ in shape")
    c, h, w = f_left.shape
    if d_max > w:
        raise ValueError(f"d_max={d_max} exceeds feature width {w}")

    def unit(f):
        f = ops.reshape(f, (groups, c // groups, h, w))
        return f / ops.sqrt(ops.sum(f * f, axis=1, keepdims=True) + 1e-12)

    fl, fr = unit(f_left), unit(f_right)
    slices = []
    for d in range(d_max):
        if d == 0:
            slices.append(ops.sum(fl * fr, axis=1))
            continue
        prod = ops.sum(fl[:, :, :, d:] * fr[:, :, :, :w - d], axis=1)      # groups x H x (W-d)
        slices.append(ops.pad(prod, [(0, 0), (0, 0), (d, 0)]))
    return ops.stack(slices, axis=1)


# ---------------------------------------------------------------- 3-D regularisation

def init_regularizer(rng, cfg: TSCAConfig) -> dict:
    c = cfg.channels
    p = {"stem": {"w": param(rng, (c, cfg.corr_groups, 3, 3, 3)), "b": zeros_param((c,))},
         "head": {"w": param(rng, (1, c, 1, 1, 1)), "b": zeros_param((1,))}}
    for j in (1, 2, 3):
        p[f"enc{j}"] = {"dw": param(rng, (c, 1, 3, 3, 3)), "dw_b": zeros_param((c,)),
                        "pw": param(rng, (c, c, 1, 1, 1)), "pw_b": zeros_param((c,))}
        p[f"dec{j}"] = {"up": param(rng, (c, c, 4, 4, 4)), "up_b": zeros_param((c,))}
        if cfg.use_seca:
            p[f"enc{j}"]["seca"] = attention.init_seca(rng, c)
            p[f"dec{j}"]["seca"] = attention.init_seca(rng, 2 * c, c_out=c, c_branch=c)
        else:
            p[f"dec{j}"]["fuse"] = param(rng, (c, 2 * c, 1, 1, 1))
            p[f"dec{j}"]["fuse_b"] = zeros_param((c,))
    return p


def regularize(volume, p: dict, cfg: TSCAConfig) -> Tensor:
    """Three-level separable 3-D UNet; SECA after every encoder/decoder block."""
    volume = as_tensor(volume)
    _, d, h, w = volume.shape
    if d % 8 or h % 8 or w % 8:
        raise ValueError(f"volume extents {(d, h, w)} must be divisible by 8")
    c = cfg.channels
    e = [ops.relu(conv3d(volume, p["stem"]["w"], p["stem"]["b"], pad=1))]
    for j in (1, 2, 3):
        q = p[f"enc{j}"]
        x = conv3d(e[-1], q["dw"], q["dw_b"], stride=2, pad=1, groups=c)
        x = ops.relu(conv3d(x, q["pw"], q["pw_b"]))
        e.append(attention.seca(x, q["seca"]) if cfg.use_seca else x)
    x = e[3]
    for j in (1, 2, 3):
        q = p[f"dec{j}"]
        up = ops.relu(conv_transpose3d(x, q["up"], q["up_b"], stride=2, pad=1))
        cat = ops.concat([up, e[3 - j]], axis=0)
        if cfg.use_seca:
            x = attention.seca(cat, q["seca"])
        else:
            x = ops.relu(conv3d(cat, q["fuse"], q["fuse_b"]))
    return conv3d(x, p["head"]["w"], p["head"]["b"])


def regularize_padded(volume, p: dict, cfg: TSCAConfig) -> Tensor:
    """``regularize`` on a volume zero-padded up to multiples of 8, cropped back."""
    volume = as_tensor(volume)
    _, d, h, w = volume.shape
    extra = [(-n) % 8 for n in (d, h, w)]
    if not any(extra):
        return regularize(volume, p, cfg)
    out = regularize(ops.pad(volume, [(0, 0)] + [(0, e) for e in extra]), p, cfg)
    return out[:, :d, :h, :w]


def soft_argmax_disparity(cost) -> Tensor:
    """Expected disparity under a softmax over the disparity axis of ``1 x D x H x W``."""
    cost = as_tensor(cost)
    d = cost.shape[1]
    prob = ops.softmax(cost, axis=1)
    bins = Tensor(np.arange(d, dtype=np.float64).reshape(1, d, 1, 1))
    return ops.sum(prob * bins, axis=1)                          # 1 x H x W


# ---------------------------------------------------------------- ConvGRU update

def init_update(rng, cfg: TSCAConfig) -> dict:
    c = cfg.channels
    taps = 2 * (2 * cfg.corr_radius + 1)
    p = {"motion": {"a": _conv(rng, c, taps + 1), "b": _conv(rng, c, c)},
         "head": {"a": _conv(rng, c, c), "b": _conv(rng, 1, c)}}
    # inputs: level 1 (1/4) motion + upsampled h2; level 2 pooled h1 + upsampled h3; level 3 pooled h2
    in_ch = {1: 2 * c, 2: 2 * c, 3: c}
    for i in (1, 2, 3):
        p[f"ctx{i}"] = _conv(rng, 3 * c, c, k=1)
        p[f"init{i}"] = _conv(rng, c, c, k=1)
        p[f"gru{i}"] = {g: _conv(rng, c, c + in_ch[i]) for g in ("z", "r", "q")}
    p["head"]["b"]["w"].data *= 0.1
    return p


def convgru_step(h: Tensor, x: Tensor, ctx: tuple[Tensor, Tensor, Tensor], p: dict,
                 force_z: float | None = None) -> Tensor:
    """One ConvGRU update with context added to each gate's pre-activation."""
    cz, cr, cq = ctx
    hx = ops.concat([h, x], axis=0)
    z = ops.sigmoid(_apply2d(hx, p["z"], act=False) + cz)
    if force_z is not None:
        z = Tensor(np.full(z.shape, force_z))
    r = ops.sigmoid(_apply2d(hx, p["r"], act=False) + cr)
    q = ops.tanh(_apply2d(ops.concat([r * h, x], axis=0), p["q"], act=False) + cq)
    return (1.0 - z) * h + z * q


def context_inputs(ctx_feats: list[Tensor], p: dict) -> tuple[list, list]:
    """Per-level (cz, cr, cq) injections and tanh-bounded initial hidden states."""
    inj, hidden = [], []
    for i, t in enumerate(ctx_feats, start=1):
        c = t.shape[0]
        proj = _apply2d(t, p[f"ctx{i}"], act=False)
        inj.append((proj[0:c], proj[c:2 * c], proj[2 * c:3 * c]))
        hidden.append(ops.tanh(_apply2d(t, p[f"init{i}"], act=False)))
    return inj, hidden


def lookup(volumes: list[Tensor], disp: np.ndarray, radius: int) -> Tensor:
    """Sample each ``1 x D x H x W`` volume at disp + {-r..r}; returns (len*taps) x H x W."""
    offsets = np.arange(-radius, radius + 1, dtype=np.float64).reshape(1, -1, 1, 1)
    pos = disp.reshape(1, 1, *disp.shape[-2:]) + offsets
    feats = [ops.gather_linear(v, pos, axis=1) for v in volumes]
    taps = 2 * radius + 1
    return ops.reshape(ops.concat(feats, axis=0), (len(volumes) * taps,) + disp.shape[-2:])


def update_step(hidden: list[Tensor], inj: list, volumes: list[Tensor], disp: Tensor,
                p: dict, cfg: TSCAConfig) -> tuple[list[Tensor], Tensor]:
    h1, h2, h3 = hidden
    d_np = disp.data
    corr = lookup(volumes, d_np, cfg.corr_radius)
    m = _apply2d(ops.concat([corr, Tensor(d_np)], axis=0), p["motion"]["a"])
    m = _apply2d(m, p["motion"]["b"])
    h3 = convgru_step(h3, avg_pool2(h2), inj[2], p["gru3"])
    h2 = convgru_step(h2, ops.concat([avg_pool2(h1), resize_bilinear(h3, *h2.shape[1:])], axis=0),
                      inj[1], p["gru2"])
    h1 = convgru_step(h1, ops.concat([m, resize_bilinear(h2, *h1.shape[1:])], axis=0), inj[0], p["gru1"])
    delta = _apply2d(_apply2d(h1, p["head"]["a"]), p["head"]["b"], act=False)
    return [h1, h2, h3], delta


# ---------------------------------------------------------------- full model

def init_tsca(cfg: TSCAConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {"feature": init_feature_net(rng, cfg), "context": init_context_net(rng, cfg),
            "reg": init_regularizer(rng, cfg), "update": init_update(rng, cfg)}


def upsample_disparity(disp: Tensor, h: int, w: int) -> Tensor:
    return resize_bilinear(disp, h, w) * float(FEATURE_SCALE)


def tsca_forward(left, right, params: dict, cfg: TSCAConfig, detached: list | None = None) -> list[Tensor]:
    """Return ``iters + 1`` full-resolution disparity maps (``1 x H x W``).

    Each update looks up the volume at, and adds its residual to, a detached
    copy of the current disparity. Pass an empty list as ``detached`` to
    record those copies; pass a filled one to replay them, which pins the
    non-differentiated path (used by finite-difference checks).
    """
    replay = bool(detached)
    left = left if isinstance(left, Tensor) else to_chw(left)
    right = right if isinstance(right, Tensor) else to_chw(right)
    _, h, w = left.shape
    if left.shape != right.shape:
        raise ValueError("stereo pair shapes differ")
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    fl = feature_net(left, params["feature"])
    fr = feature_net(right, params["feature"])
    corr = correlation_volume(fl, fr, cfg.d_max, cfg.corr_groups)
    geo = regularize_padded(corr, params["reg"], cfg)
    ctx = context_net(left, cfg, params["context"])
    inj, hidden = context_inputs(ctx, params["update"])
    hi = float(cfg.d_max - 1)
    disp = ops.clip(soft_argmax_disparity(geo), 0.0, hi)
    iterates = [upsample_disparity(disp, h, w)]
    # the lookup volume pairs the regularised volume with the raw correlation
    volumes = [geo, ops.mean(corr, axis=0, keepdims=True)]
    detached_out = detached if detached is not None else []
    for k in range(cfg.iters):
        base = Tensor(detached[k]) if replay else disp.detach()
        if detached is not None and not replay:
            detached_out.append(base.data.copy())
        hidden, delta = update_step(hidden, inj, volumes, base, params["update"], cfg)
        disp = ops.clip(base + delta, 0.0, hi)
        iterates.append(upsample_disparity(disp, h, w))
    return iterates


def sequence_loss(iterates: list, D_gt, mask, gamma: float = 0.9) -> Tensor:
    """Sum over iterates of gamma^(K-k) times the masked mean absolute error."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty valid mask")
    gt = Tensor(np.asarray(D_gt, dtype=np.float64).reshape(1, *mask.shape))
    m = mask.reshape(1, *mask.shape).astype(np.float64)
    count = float(m.sum())
    k_last = len(iterates) - 1
    total = None
    for k, d in enumerate(iterates):
        term = ops.sum(ops.abs(as_tensor(d) - gt) * m) * (gamma ** (k_last - k) / count)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- toy data and training

@dataclass
class StereoPair:
    left: np.ndarray         # H x W x 3 in [0, 1]
    right: np.ndarray
    disparity: np.ndarray    # H x W, input pixels
    mask: np.ndarray


def textured_plane_pairs(n: int = 8, size: int = 64, d_range=(4.0, 40.0), seed: int = 0) -> list[StereoPair]:
    """Fronto-parallel planes carrying smoothed random texture at constant disparity."""
    from scipy import ndimage

    if not 0 <= d_range[0] <= d_range[1] < size:
        raise ValueError(f"disparity range {d_range} does not fit a {size}-pixel crop")
    rng = np.random.default_rng(seed)
    pairs = []
    pad = int(np.ceil(d_range[1])) + 2
    for d_true in np.linspace(d_range[0], d_range[1], n):
        tex = rng.random((size, size + pad, 3))
        tex = ndimage.gaussian_filter(tex, sigma=(1.0, 1.0, 0))
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        cols = np.arange(size + pad, dtype=np.float64)
        u = np.arange(size, dtype=np.float64)
        right = tex[:, :size].copy()
        left = np.empty_like(right)
        for v in range(size):
            for ch in range(3):
                left[v, :, ch] = np.interp(u + d_true, cols, tex[v, :, ch])
        mask = np.broadcast_to(u >= d_true, (size, size)).copy()
        pairs.append(StereoPair(left, right, np.full((size, size), d_true), mask))
    return pairs


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    epes: list = field(default_factory=list)       # per-step mean EPE of the final iterate
    seconds: float = 0.0


def evaluate_epe(params: dict, cfg: TSCAConfig, pairs: list[StereoPair]) -> float:
    with no_grad():
        vals = [epe(tsca_forward(p.left, p.right, params, cfg)[-1].data[0], p.disparity, p.mask) for p in pairs]
    return float(np.mean(vals))


def train_toy(pairs: list[StereoPair], cfg: TSCAConfig, steps: int, seed: int = 0, lr: float = 2e-3,
              batch: int = 2, schedule: str = "constant", lr_low: float = 1e-5, lr_high: float = 1e-3,
              params: dict | None = None, log=None) -> TrainResult:
    """Adam on the sequence loss over a fixed set of pairs; deterministic per seed."""
    if not pairs:
        raise ValueError("empty dataset")
    params = init_tsca(cfg, seed) if params is None else params
    flat = flatten_params(params)
    opt = Adam(flat, lr=lr)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(params)
    prepared = [(to_chw(p.left), to_chw(p.right), p) for p in pairs]
    start = time.perf_counter()
    for step in range(steps):
        if schedule == "cyclic":
            opt.lr = cyclic_lr(step, steps, lr_low, lr_high)
        idx = rng.choice(len(prepared), size=min(batch, len(prepared)), replace=False)
        opt.zero_grad()
        loss_val, epe_val = 0.0, 0.0
        for i in np.sort(idx):
            left, right, pair = prepared[i]
            its = tsca_forward(left, right, params, cfg)
            loss = sequence_loss(its, pair.disparity, pair.mask, cfg.gamma) * (1.0 / len(idx))
            backward(loss)
            loss_val += loss.item()
            epe_val += epe(its[-1].data[0], pair.disparity, pair.mask) / len(idx)
        opt.step()
        result.losses.append(loss_val)
        result.epes.append(epe_val)
        if log is not None:
            log(step, loss_val, epe_val)
    result.seconds = time.perf_counter() - start
    return result


def config_dict(cfg: TSCAConfig) -> dict:
    return asdict(cfg)
