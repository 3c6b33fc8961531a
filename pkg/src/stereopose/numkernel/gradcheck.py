from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param``.

    ``index`` restricts the probe to a subset of flat positions; the other
    entries of the result are left as NaN.
    """
    flat = param.data.reshape(-1)
    if not np.shares_memory(flat, param.data):
        raise ValueError("parameter storage must be contiguous")
    out = np.full(flat.size, np.nan)
    positions = range(flat.size) if index is None else index
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor) over probed entries."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_probes: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Worst relative error per parameter between backward() and central differences."""
    for p in params.values():
        p.grad = None
    backward(fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        index = None
        if max_probes is not None and p.size > max_probes:
            rng = rng or np.random.default_rng(0)
            index = np.sort(rng.choice(p.size, size=max_probes, replace=False))
        errors[name] = relative_error(analytic, numeric_grad(fn, p, h, index))
    return errors


def check_directional(fn: Callable[[], Tensor], params: dict, h: float = 1e-5,
                      rng: np.random.Generator | None = None, n_dirs: int = 1, h_min: float = 1e-9,
                      accept: float = 2e-5, settle: float = 1e-5) -> dict[str, float]:
    """Directional-derivative check: grad . v against central differences along a random unit v.

    ``params`` maps a name to a tensor or to a list of tensors probed jointly
    along one direction. One difference pair per direction makes this cheap
    enough for whole networks. A kink inside the step shifts the central
    difference by at most about half the gap between the forward and backward
    quotients, so the first estimate is kept when that gap is below
    ``accept``. Otherwise the step is cut tenfold until two successive
    estimates agree to ``settle`` while the gap shrinks with the step, as it
    does on a smooth stretch. If that never happens before ``h_min``, the
    coarser member of the least-changing pair is used. Relative measures
    include a roundoff bound.
    """
    rng = rng or np.random.default_rng(0)
    eps = np.finfo(np.float64).eps
    groups = {k: [v] if isinstance(v, Tensor) else list(v) for k, v in params.items()}
    for ts in groups.values():
        for t in ts:
            t.grad = None
    backward(fn())
    with no_grad():
        f0 = fn().item()
    errors = {}
    for name, ts in groups.items():
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
        origs = [t.data.copy() for t in ts]

        def shift(vs, step):
            for t, o, v in zip(ts, origs, vs):
                t.data[...] = o + step * v

        worst = 0.0
        for _ in range(n_dirs):
            vs = [rng.standard_normal(t.shape) for t in ts]
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
            vs = [v / norm for v in vs]
            analytic = float(sum(np.sum(g * v) for g, v in zip(grads, vs)))
            step, prev, best = h, None, (np.inf, None)
            with no_grad():
                while True:
                    shift(vs, step)
                    up = fn().item()
                    shift(vs, -step)
                    down = fn().item()
                    shift(vs, 0.0)
                    est = (up - down) / (2 * step)
                    fwd, bwd = (up - f0) / step, (f0 - down) / step
                    scale = max(abs(fwd), abs(bwd), 1e-4)
                    noise = 4 * eps * max(abs(up), abs(down), abs(f0)) / step
                    gap = (abs(fwd - bwd) + noise) / scale
                    if prev is None and gap <= accept:
                        numeric = est
                        break
                    if prev is not None:
                        change = (abs(est - prev[0]) + noise) / scale
                        if change < best[0]:
                            best = (change, prev[0])
                        if change <= settle and gap <= 0.2 * prev[1] + accept:
                            numeric = prev[0]
                            break
                    if step / 10 < h_min:
                        numeric = best[1] if best[1] is not None else est
                        break
                    prev = (est, gap)
                    step /= 10
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
        errors[name] = worst
    return errors
