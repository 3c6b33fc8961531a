"""Registry of finite-difference gradient checks, shared by the CLI and the test suite.

Every case builds a scalar function of a few trainable tensors; the check
compares backward() with central differences. Primitive ops must agree to
1e-6 and composite blocks to 1e-4 (relative, floor 1e-4).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import attention, pose_pipeline, stereo_network
from .numkernel import conv, layers, ops
from .numkernel.gradcheck import check_directional, check_gradients
from .numkernel.tensor import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
MODULES = ("numkernel", "attention", "stereo_network", "pose-head")


@dataclass(frozen=True)
class GradCase:
    module: str
    name: str
    build: Callable        # rng -> (fn, {name: Tensor})
    primitive: bool = False
    max_params: int | None = None      # probe a random subset of tensors (large models)
    max_probes: int | None = None      # overrides the run-wide probe count
    directional: bool = False          # random-direction derivatives (whole networks)
    group_layers: bool = False         # one joint direction per layer instead of per tensor

    @property
    def tol(self) -> float:
        return PRIMITIVE_TOL if self.primitive else COMPOSITE_TOL


@dataclass
class GradRow:
    module: str
    op: str
    seed: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _leaf(rng, shape, away_from_zero: bool = False, positive: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.2 + np.abs(x))
    if positive:
        x = 0.5 + np.abs(x)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Fixed random linear functional so every output entry matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return lambda y: ops.sum(y * w)


def _unary(fn, **leaf_kw):
    def build(rng):
        x = _leaf(rng, (3, 4), **leaf_kw)
        proj = _project(fn(x), rng)
        return (lambda: proj(fn(x))), {"x": x}
    return build


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4), **leaf_kw):
    def build(rng):
        a, b = _leaf(rng, shape_a), _leaf(rng, shape_b, **leaf_kw)
        proj = _project(fn(a, b), rng)
        return (lambda: proj(fn(a, b))), {"a": a, "b": b}
    return build


def _jitter(params: dict[str, Tensor], rng, scale: float = 0.1) -> dict[str, Tensor]:
    """Move off the init point: zero biases put ReLUs exactly on their kink."""
    for p in params.values():
        p.data += scale * rng.standard_normal(p.shape)
    return params


def _params_case(init, forward, inputs):
    """Generic composite: ``init(rng) -> params``; ``inputs(rng) -> tuple``; ``forward(params, *inputs)``."""
    def build(rng):
        p = init(rng)
        args = inputs(rng)
        flat = _jitter(layers.flatten_params(p), rng)
        proj = _project(forward(p, *args), rng)
        return (lambda: proj(forward(p, *args))), flat
    return build


def _numkernel_cases() -> list[GradCase]:
    def gather_build(rng):
        vol = _leaf(rng, (2, 6, 3))
        pos = rng.uniform(-0.5, 5.5, size=(2, 4, 3))
        pos = np.where(np.abs(pos - np.round(pos)) < 0.05, pos + 0.1, pos)
        proj = _project(ops.gather_linear(vol, pos, axis=1), rng)
        return (lambda: proj(ops.gather_linear(vol, pos, axis=1))), {"volume": vol}

    def where_build(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        mask = rng.random((3, 4)) > 0.5
        proj = _project(ops.where(mask, a, b), rng)
        return (lambda: proj(ops.where(mask, a, b))), {"a": a, "b": b}

    def conv3d_build(rng):
        x, k, b = _leaf(rng, (4, 5, 6, 5)), _leaf(rng, (6, 2, 3, 3, 3)), _leaf(rng, (6,))
        f = lambda: conv.conv3d(x, k, b, stride=2, pad=1, groups=2)
        proj = _project(f(), rng)
        return (lambda: proj(f())), {"x": x, "kernel": k, "bias": b}

    def conv2d_build(rng):
        x, k = _leaf(rng, (3, 6, 7)), _leaf(rng, (2, 3, 3, 3))
        f = lambda: conv.conv2d(x, k, pad=1)
        proj = _project(f(), rng)
        return (lambda: proj(f())), {"x": x, "kernel": k}

    def convt_build(rng):
        x, k, b = _leaf(rng, (3, 2, 3, 2)), _leaf(rng, (3, 2, 4, 4, 4)), _leaf(rng, (2,))
        f = lambda: conv.conv_transpose3d(x, k, b, stride=2, pad=1)
        proj = _project(f(), rng)
        return (lambda: proj(f())), {"x": x, "kernel": k, "bias": b}

    def ln_build(rng):
        x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (5,)), _leaf(rng, (5,))
        f = lambda: layers.layer_norm(x, axis=1, weight=w, bias=b)
        proj = _project(f(), rng)
        return (lambda: proj(f())), {"x": x, "weight": w, "bias": b}

    def max_build(rng):
        x = Tensor(rng.permutation(12).reshape(3, 4) * 0.3 + rng.random((3, 4)) * 0.01, requires_grad=True)
        proj = _project(ops.max(x, axis=1), rng)
        return (lambda: proj(ops.max(x, axis=1))), {"x": x}

    N = "numkernel"
    return [
        GradCase(N, "add", _binary(ops.add, shape_b=(4,)), True),
        GradCase(N, "sub", _binary(ops.sub), True),
        GradCase(N, "mul", _binary(ops.mul, shape_b=(3, 1)), True),
        GradCase(N, "div", _binary(ops.div, away_from_zero=True), True),
        GradCase(N, "power", _unary(lambda x: ops.power(x, 2.5), positive=True), True),
        GradCase(N, "exp", _unary(ops.exp), True),
        GradCase(N, "log", _unary(ops.log, positive=True), True),
        GradCase(N, "sqrt", _unary(ops.sqrt, positive=True), True),
        GradCase(N, "abs", _unary(ops.abs, away_from_zero=True), True),
        GradCase(N, "clip", _unary(lambda x: ops.clip(x, -0.1, 0.1), away_from_zero=True), True),
        GradCase(N, "relu", _unary(ops.relu, away_from_zero=True), True),
        GradCase(N, "sigmoid", _unary(ops.sigmoid), True),
        GradCase(N, "tanh", _unary(ops.tanh), True),
        GradCase(N, "silu", _unary(ops.silu), True),
        GradCase(N, "matmul", _binary(ops.matmul, shape_a=(2, 3, 4), shape_b=(4, 5)), True),
        GradCase(N, "sum", _unary(lambda x: ops.sum(x, axis=0)), True),
        GradCase(N, "mean", _unary(lambda x: ops.mean(x, axis=1, keepdims=True)), True),
        GradCase(N, "max", max_build, True),
        GradCase(N, "softmax", _unary(lambda x: ops.softmax(x, axis=1)), True),
        GradCase(N, "reshape", _unary(lambda x: ops.reshape(x, (2, 6))), True),
        GradCase(N, "permute", _unary(lambda x: ops.permute(x, (1, 0))), True),
        GradCase(N, "getitem", _unary(lambda x: x[np.array([0, 2, 2]), 1:]), True),
        GradCase(N, "concat", _binary(lambda a, b: ops.concat([a, b], axis=1), shape_b=(3, 2)), True),
        GradCase(N, "stack", _binary(lambda a, b: ops.stack([a, b], axis=1)), True),
        GradCase(N, "expand_dims", _unary(lambda x: ops.expand_dims(x, 1)), True),
        GradCase(N, "pad", _unary(lambda x: ops.pad(x, [(1, 0), (0, 2)])), True),
        GradCase(N, "dilate", _unary(lambda x: ops.dilate(x, 2, (0, 1))), True),
        GradCase(N, "where", where_build, True),
        GradCase(N, "gather_linear", gather_build, True),
        GradCase(N, "norm", _unary(lambda x: ops.norm(x, axis=1)), True),
        GradCase(N, "conv3d", conv3d_build, True),
        GradCase(N, "conv2d", conv2d_build, True),
        GradCase(N, "conv_transpose3d", convt_build, True),
        GradCase(N, "layer_norm", ln_build, True),
        GradCase(N, "instance_norm", _unary(lambda x: layers.instance_norm(ops.reshape(x, (3, 2, 2)))), True),
    ]


def _attention_cases() -> list[GradCase]:
    A = "attention"
    d, n = 6, 5
    tokens = lambda rng: (Tensor(rng.standard_normal((n, d)), requires_grad=True),
                          Tensor(rng.standard_normal((n, d)), requires_grad=True))

    def with_inputs(init, forward, inputs):
        # inputs are differentiated too
        def build(rng):
            p = init(rng)
            args = inputs(rng)
            flat = _jitter(layers.flatten_params(p), rng)
            flat.update({f"input{i}": a for i, a in enumerate(args)})
            proj = _project(forward(p, *args), rng)
            return (lambda: proj(forward(p, *args))), flat
        return build

    def ecft_case(label):
        dirs = attention.FusionDirections.from_label(label)
        return with_inputs(lambda r: attention.init_ecft(r, d),
                           lambda p, fp, fr: ops.concat(list(attention.ecft(fp, fr, p, dirs)), axis=1), tokens)

    vol = lambda rng: (Tensor(rng.standard_normal((4, 4, 3, 4)), requires_grad=True),)
    return [
        GradCase(A, "triplet_attention", with_inputs(
            lambda r: attention.init_triplet(r), lambda p, x: attention.triplet_attention(x, p),
            lambda rng: (Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True),))),
        GradCase(A, "eca", with_inputs(
            lambda r: {"w": layers.param(r, (3,))}, lambda p, x: attention.eca(x, p["w"]), vol)),
        GradCase(A, "seca", with_inputs(lambda r: attention.init_seca(r, 4), lambda p, x: attention.seca(x, p), vol)),
        GradCase(A, "ecaa", with_inputs(lambda r: attention.init_ecaa(r, d),
                                        lambda p, fs, ft: attention.ecaa(fs, ft, p), tokens)),
        GradCase(A, "ecaa_layer_norm", with_inputs(
            lambda r: attention.init_ecaa(r, d),
            lambda p, fs, ft: attention.ecaa(fs, ft, p, attention.ECAAOptions(query_norm="layer")), tokens)),
        GradCase(A, "gffn", with_inputs(
            lambda r: {"g": attention.init_gffn(r, d), "t": attention.init_ecaa(r, d)},
            lambda p, x, f: attention.gffn(x, f, p["g"], p["t"]), tokens)),
        GradCase(A, "augsc", with_inputs(
            lambda r: {"w": layers.param(r, (d, d)), "b": layers.param(r, (d,))},
            lambda p, f: attention.augsc(f, p["w"], p["b"]),
            lambda rng: (Tensor(rng.standard_normal((n, d)), requires_grad=True),))),
        GradCase(A, "ecft_both", ecft_case("both")),
        GradCase(A, "ecft_rgb_to_point", ecft_case("rgb_to_point")),
        GradCase(A, "ecft_point_to_rgb", ecft_case("point_to_rgb")),
        GradCase(A, "vanilla_block", with_inputs(lambda r: attention.init_vanilla_block(r, d),
                                                 lambda p, fs, ft: attention.vanilla_block(fs, ft, p), tokens)),
    ]


SMALL_TSCA = stereo_network.TSCAConfig(channels=4, d_max=8, iters=2)


def _stereo_cases() -> list[GradCase]:
    S = "stereo_network"
    cfg = SMALL_TSCA

    def images(rng):
        base = rng.random((32, 40, 3))
        left = base[:, 4:36]
        right = base[:, 2:34]
        return stereo_network.to_chw(left), stereo_network.to_chw(right)

    def full_build(rng):
        params = stereo_network.init_tsca(cfg, int(rng.integers(1 << 31)))
        left, right = images(rng)
        gt = np.full((32, 32), 2.0)
        mask = np.ones((32, 32), dtype=bool)
        mask[:, :4] = False
        flat = _jitter(layers.flatten_params(params), rng)
        trace: list = []
        stereo_network.tsca_forward(left, right, params, cfg, detached=trace)
        fn = lambda: stereo_network.sequence_loss(stereo_network.tsca_forward(left, right, params, cfg, trace),
                                                  gt, mask, cfg.gamma)
        return fn, flat

    def corr_build(rng):
        fl, fr = _leaf(rng, (4, 3, 9)), _leaf(rng, (4, 3, 9))
        f = lambda: stereo_network.correlation_volume(fl, fr, 5, groups=2)
        proj = _project(f(), rng)
        return (lambda: proj(f())), {"f_left": fl, "f_right": fr}

    def gru_build(rng):
        c = cfg.channels
        p = {g: stereo_network._conv(rng, c, 2 * c) for g in ("z", "r", "q")}
        _jitter(layers.flatten_params(p), rng)
        h, x = _leaf(rng, (c, 4, 5)), _leaf(rng, (c, 4, 5))
        ctx = tuple(_leaf(rng, (c, 4, 5)) for _ in range(3))
        f = lambda: stereo_network.convgru_step(h, x, ctx, p)
        proj = _project(f(), rng)
        flat = layers.flatten_params(p)
        flat.update({"h": h, "x": x, "cz": ctx[0], "cr": ctx[1], "cq": ctx[2]})
        return (lambda: proj(f())), flat

    def reg_build(rng):
        p = stereo_network.init_regularizer(rng, cfg)
        vol = _leaf(rng, (1, 8, 8, 8))
        f = lambda: stereo_network.regularize(vol, p, cfg)
        proj = _project(f(), rng)
        flat = _jitter(layers.flatten_params(p), rng)
        flat["volume"] = vol
        return (lambda: proj(f())), flat

    cases = [
        GradCase(S, "feature_net", _params_case(
            lambda r: stereo_network.init_feature_net(r, cfg), lambda p, x: stereo_network.feature_net(x, p),
            lambda rng: (stereo_network.to_chw(rng.random((16, 16, 3))),))),
        GradCase(S, "context_net", _params_case(
            lambda r: stereo_network.init_context_net(r, cfg),
            lambda p, x: ops.concat([ops.reshape(t, (-1,)) for t in stereo_network.context_net(x, cfg, p)], axis=0),
            lambda rng: (stereo_network.to_chw(rng.random((16, 16, 3))),))),
        GradCase(S, "correlation_volume", corr_build),
        GradCase(S, "regularize", reg_build),
        GradCase(S, "soft_argmax", _unary(lambda x: stereo_network.soft_argmax_disparity(ops.reshape(x, (1, 3, 2, 2))))),
        GradCase(S, "convgru_step", gru_build),
        GradCase(S, "tsca_sequence_loss", full_build, group_layers=True),
    ]
    # thousands of ReLU / max-pool kinks: directional checks with step refinement
    return [replace(c, directional=True) for c in cases]


def _pose_head_cases() -> list[GradCase]:
    P = "pose-head"
    n, m = 12, 4

    def head_build(rng):
        params = pose_pipeline.init_pose_head(rng, d=6, n_keypoints=m, hidden=8)
        pts = rng.standard_normal((n, 3)) + np.array([0, 0, 20.0])
        cols = rng.random((n, 3))
        kp_cam = rng.standard_normal((m, 3)) + np.array([0, 0, 20.0])
        kp_t, ctr_t = pose_pipeline.pose_head_targets(pts, kp_cam, kp_cam.mean(axis=0))
        labels = (rng.random(n) > 0.3).astype(int)
        ind = labels == 1

        def fn():
            kp, ctr, conf = pose_pipeline.pose_head_forward(params, pts, cols, scale=2.0)
            return pose_pipeline.multitask_loss(pose_pipeline.keypoint_loss(kp, kp_t, ind),
                                                pose_pipeline.focal_loss(conf, labels),
                                                pose_pipeline.center_loss(ctr, ctr_t, ind))
        return fn, _jitter(layers.flatten_params(params), rng)

    def kp_build(rng):
        pred, tgt = _leaf(rng, (n, m, 3)), rng.standard_normal((n, m, 3))
        ind = rng.random(n) > 0.3
        return (lambda: pose_pipeline.keypoint_loss(pred, tgt, ind)), {"pred": pred}

    def ctr_build(rng):
        pred, tgt = _leaf(rng, (n, 3)), rng.standard_normal((n, 3))
        return (lambda: pose_pipeline.center_loss(pred, tgt)), {"pred": pred}

    def focal_build(rng):
        logits = _leaf(rng, (n, 3))
        labels = rng.integers(0, 3, size=n)
        return (lambda: pose_pipeline.focal_loss(ops.softmax(logits, axis=1), labels)), {"logits": logits}

    return [
        GradCase(P, "keypoint_loss", kp_build),
        GradCase(P, "center_loss", ctr_build),
        GradCase(P, "focal_loss", focal_build),
        GradCase(P, "pose_head_multitask", head_build),
    ]


def all_cases() -> list[GradCase]:
    return _numkernel_cases() + _attention_cases() + _stereo_cases() + _pose_head_cases()


def select_cases(module: str = "all") -> list[GradCase]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES + ('all',)}")
    return [c for c in all_cases() if module == "all" or c.module == module]


def run_gradchecks(module: str = "all", seeds=(0,), max_probes: int = 6, h: float = 1e-5) -> list[GradRow]:
    rows = []
    for seed in seeds:
        for case in select_cases(module):
            rng = np.random.default_rng([seed, len(case.name)])
            fn, params = case.build(rng)
            if case.max_params is not None and len(params) > case.max_params:
                keep = rng.choice(sorted(params), size=case.max_params, replace=False)
                params = {k: params[k] for k in sorted(keep)}
            probes = case.max_probes if case.max_probes is not None else max_probes
            if case.directional:
                if case.group_layers:
                    grouped: dict[str, list] = {}
                    for key in sorted(params):
                        grouped.setdefault(key.rsplit(".", 1)[0], []).append(params[key])
                    params = grouped
                errs = check_directional(fn, params, h=h, rng=np.random.default_rng(seed))
            else:
                errs = check_gradients(fn, params, h=h, max_probes=probes, rng=np.random.default_rng(seed))
            rows.append(GradRow(case.module, case.name, seed, max(errs.values()), case.tol))
    return rows


def timed_gradchecks(module: str = "all", seeds=(0,), max_probes: int = 6) -> tuple[list[GradRow], float]:
    start = time.perf_counter()
    rows = run_gradchecks(module, seeds, max_probes)
    return rows, time.perf_counter() - start
