"""Rectified pinhole stereo geometry, depth rasterisation and image degradations.

Pixel coordinates put integer values at pixel centres: column ``u`` and row
``v`` of an ``H x W`` array sit at ``(u, v)``. Disparity is left-referenced,
``d = u_left - u_right >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rigid import Pose

D_MIN = 1e-6  # px; disparities at or below are invalid


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class StereoRig:
    intrinsics: CameraIntrinsics
    baseline: float = 1.0  # m

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "baseline": self.baseline}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoRig":
        return cls(CameraIntrinsics(**d["intrinsics"]), d["baseline"])

    def right_pose(self, pose: Pose) -> Pose:
        """Object pose seen from the right camera (left camera shifted +B along x)."""
        return Pose(pose.R, pose.t - np.array([self.baseline, 0.0, 0.0]))


def desk_rig(width: int = 160, height: int = 120, focal: float = 200.0, baseline: float = 1.0) -> StereoRig:
    # full scale would be 1280 x 960 with an unknown focal length
    return StereoRig(CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height), baseline)


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("disparity and mask shapes differ")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PointCloud:
    points: np.ndarray                      # N x 3, camera frame
    pixels: np.ndarray | None = None        # N x 2 source (u, v)
    labels: np.ndarray | None = None        # N
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------- triangulation

def disparity_to_depth(disp: DisparityMap, rig: StereoRig, d_min: float = D_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Z = fx * B / d; returns (depth, valid). Invalid entries hold 0."""
    valid = disp.valid & (disp.values > d_min)
    depth = np.zeros_like(disp.values)
    depth[valid] = rig.intrinsics.fx * rig.baseline / disp.values[valid]
    return depth, valid


def depth_to_disparity(depth: np.ndarray, valid: np.ndarray, rig: StereoRig) -> DisparityMap:
    valid = np.asarray(valid, dtype=bool) & (depth > 0)
    d = np.zeros_like(depth, dtype=np.float64)
    d[valid] = rig.intrinsics.fx * rig.baseline / depth[valid]
    return DisparityMap(d, valid)


def backproject(depth: np.ndarray, valid: np.ndarray, K: CameraIntrinsics) -> PointCloud:
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return PointCloud(np.stack([x, y, z], axis=1), np.stack([u, v], axis=1).astype(np.float64))


def project(points, K: CameraIntrinsics) -> np.ndarray:
    """(u, v, z) for one 3-vector or an N x 3 array; raises for z <= 0."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p[:, 2] <= 0):
        raise ValueError("point behind the camera (z <= 0)")
    u = K.fx * p[:, 0] / p[:, 2] + K.cx
    v = K.fy * p[:, 1] / p[:, 2] + K.cy
    out = np.stack([u, v, p[:, 2]], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------- rasterisation

def pixel_rays(K: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u, dtype=np.float64)], axis=-1)


def rasterize_depth(triangles: np.ndarray, pose: Pose, K: CameraIntrinsics,
                    resolution: tuple[int, int] | None = None, near: float = 1e-3):
    """Z-buffer render of object-frame triangles (T x 3 x 3).

    Pixel centres are sampled with no anti-aliasing; depth comes from exact
    ray/plane intersection. Returns ``(depth, valid, tri_index)`` where
    ``tri_index`` is -1 on background.
    """
    width, height = resolution if resolution is not None else (K.width, K.height)
    depth = np.full((height, width), np.inf)
    tri_index = np.full((height, width), -1, dtype=np.int64)
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    for ti, tri in enumerate(tris):
        cam = pose.apply(tri)
        normal = np.cross(cam[1] - cam[0], cam[2] - cam[0])
        if np.linalg.norm(normal) < 1e-12 or np.any(cam[:, 2] <= near):
            continue
        uv = project(cam, K)[:, :2]
        e1, e2 = uv[1] - uv[0], uv[2] - uv[0]
        area = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(area) < 1e-12:
            continue
        u0 = max(int(np.ceil(uv[:, 0].min())), 0)
        u1 = min(int(np.floor(uv[:, 0].max())), width - 1)
        v0 = max(int(np.ceil(uv[:, 1].min())), 0)
        v1 = min(int(np.floor(uv[:, 1].max())), height - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1].astype(np.float64)
        px, py = uu - uv[0, 0], vv - uv[0, 1]
        b1 = (px * e2[1] - py * e2[0]) / area
        b2 = (e1[0] * py - e1[1] * px) / area
        inside = (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
        if not inside.any():
            continue
        rays = pixel_rays(K, uu, vv)
        denom = rays @ normal
        ok = inside & (np.abs(denom) > 1e-15)
        z = np.where(ok, (cam[0] @ normal) / np.where(ok, denom, 1.0), np.inf)
        ok &= z > near
        region = depth[v0:v1 + 1, u0:u1 + 1]
        closer = ok & (z < region)
        region[closer] = z[closer]
        tri_index[v0:v1 + 1, u0:u1 + 1][closer] = ti
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return depth, valid, tri_index


# ---------------------------------------------------------------- degradations

@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"          # none | speckle | gaussian_blur | motion_blur
    sigma: float = 0.0          # speckle std or blur sigma (px)
    length: float = 1.0         # motion blur length (px)
    angle: float = 0.0          # motion blur direction (degrees)

    def __post_init__(self):
        if self.kind not in {"none", "speckle", "gaussian_blur", "motion_blur"}:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "motion_blur" and self.length < 1:
            raise ValueError("motion blur length must be >= 1")


# unvalidated against any published magnitudes
DEFAULT_NOISE = {
    "none": NoiseSpec("none"),
    "speckle": NoiseSpec("speckle", sigma=0.15),
    "gaussian_blur": NoiseSpec("gaussian_blur", sigma=1.0),
    "motion_blur": NoiseSpec("motion_blur", length=5.0, angle=30.0),
}


def motion_kernel(length: float, angle_deg: float) -> np.ndarray:
    """Normalised line kernel; samples along the segment are splatted bilinearly."""
    half = int(np.ceil((length - 1) / 2)) + 1
    size = 2 * half + 1
    k = np.zeros((size, size))
    n = max(int(np.ceil(length * 4)), 2)
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    a = np.deg2rad(angle_deg)
    xs, ys = half + t * np.cos(a), half - t * np.sin(a)
    for x, y in zip(xs, ys):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        k[y0, x0] += (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += fx * (1 - fy)
        k[y0 + 1, x0] += (1 - fx) * fy
        k[y0 + 1, x0 + 1] += fx * fy
    return k / k.sum()


def degrade(img: np.ndarray, spec: NoiseSpec, seed: int = 0) -> np.ndarray:
    """Apply one degradation to an ``H x W`` or ``H x W x C`` image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "none":
        return img.copy()
    if spec.kind == "speckle":
        n = np.random.default_rng(seed).standard_normal(img.shape)
        return np.clip(img * (1.0 + spec.sigma * n), 0.0, 1.0)
    spatial = (0, 1)
    if spec.kind == "gaussian_blur":
        if spec.sigma == 0:
            return img.copy()
        out = img
        for ax in spatial:
            out = ndimage.gaussian_filter1d(out, spec.sigma, axis=ax, mode="nearest", truncate=3.0)
        return np.clip(out, 0.0, 1.0)
    k = motion_kernel(spec.length, spec.angle)
    if img.ndim == 3:
        k = k[:, :, None]
    return np.clip(ndimage.correlate(img, k, mode="nearest"), 0.0, 1.0)


# ---------------------------------------------------------------- file formats

def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale little-endian PFM (scale -1), rows stored bottom-up."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        kind, dims, scale_line, _ = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PFM header") from exc
    pos = len(kind) + len(dims) + len(scale_line) + 3
    channels = {b"Pf": 1, b"PF": 3}.get(kind.strip())
    if channels is None:
        raise ValueError(f"{path}: not a PFM file")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(raw) - pos < 4 * count:
        raise ValueError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(raw, dtype=dtype, offset=pos, count=count).astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].copy()


def write_pnm(path, img: np.ndarray) -> None:
    """8-bit PGM (2-D input) or PPM (H x W x 3) from values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None or int(tokens[3]) != 255:
        raise ValueError(f"{path}: unsupported PNM header")
    count = w * h * channels
    if len(raw) - pos < count:
        raise ValueError(f"{path}: truncated image payload")
    arr = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=count).astype(np.float64) / 255.0
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))
