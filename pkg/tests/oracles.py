"""Independent straight-line reference implementations used by the tests."""
import numpy as np


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def conv3d_naive(x: np.ndarray, kernel: np.ndarray, stride=1, pad=0, groups: int = 1) -> np.ndarray:
    """Nested-loop reference implementation used as a test oracle."""
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(pad)
    x = np.pad(x, [(0, 0), (pd, pd), (ph, ph), (pw, pw)])
    c_in, d, h, w = x.shape
    c_out, c_per, kd, kh, kw = kernel.shape
    od, oh, ow = (d - kd) // sd + 1, (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((c_out, od, oh, ow))
    per_out = c_out // groups
    for o in range(c_out):
        g = o // per_out
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    acc = 0.0
                    for c in range(c_per):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += kernel[o, c, a, b, e] * x[g * c_per + c, i * sd + a, j * sh + b, l * sw + e]
                    out[o, i, j, l] = acc
    return out


def ray_triangle_depth(triangle_cam: np.ndarray, ray: np.ndarray) -> float | None:
    """Moller-Trumbore along ``ray`` from the origin; returns the hit's z or None."""
    v0, v1, v2 = triangle_cam
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(ray, e2)
    det = e1 @ p
    if abs(det) < 1e-15:
        return None
    inv = 1.0 / det
    s = -v0
    a = (s @ p) * inv
    if a < -1e-12 or a > 1 + 1e-12:
        return None
    q = np.cross(s, e1)
    b = (ray @ q) * inv
    if b < -1e-12 or a + b > 1 + 1e-12:
        return None
    t = (e2 @ q) * inv
    return float(t * ray[2]) if t > 0 else None
