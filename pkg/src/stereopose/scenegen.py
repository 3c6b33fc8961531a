"""Procedural stereo dataset of a box-and-panels spacecraft.

Each sample is rendered twice (left camera and a right camera shifted by the
baseline along +x) with a z-buffer rasteriser, shaded with one of four
illumination recipes, degraded with one of four noise tags, and annotated
with the left-referenced ground-truth disparity, instance mask and pose.

On disk::

    root/manifest.json
    root/NNNNN/{left.ppm, right.ppm, disp.pfm, disp.f64, mask.pgm, pose.json, meta.json}

``disp.f64`` is a lossless float64 copy of ``disp.pfm`` (float32) so the
consistency validator can work at 1e-6 px.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkernel.io import load_tensor, save_tensor
from .pose_pipeline import KeypointSet, fps_select
from .rigid import Pose, random_rotation
from .stereo_geometry import (
    DEFAULT_NOISE, DisparityMap, NoiseSpec, StereoRig, degrade, depth_to_disparity, desk_rig,
    pixel_rays, rasterize_depth, read_pfm, read_pnm, write_pfm, write_pnm,
)

ILLUMINATIONS = ("direct_solar", "earth_albedo", "penumbra", "mixed")
NOISE_TAGS = ("none", "speckle", "gaussian_blur", "motion_blur")
DISPARITY_TOL = 1e-6        # px
FORMAT_VERSION = 1

# full scale for reference: 39,600 samples at 1280 x 960
DESK_SAMPLES = 200


class DatasetError(RuntimeError):
    """Missing, corrupt or inconsistent dataset content."""


# ---------------------------------------------------------------- target model

@dataclass(frozen=True)
class TargetParams:
    body: tuple = (1.6, 1.6, 1.6)          # x, y, z extents (m)
    panel_length: float = 2.2              # along x, each side
    panel_width: float = 1.0               # along y
    panel_thickness: float = 0.06          # along z
    panel_gap: float = 0.2                 # body face to panel root
    n_points: int = 2000
    n_keypoints: int = 8
    seed: int = 0

    def __post_init__(self):
        dims = (*self.body, self.panel_length, self.panel_width, self.panel_thickness)
        if min(dims) <= 0 or self.panel_gap < 0:
            raise ValueError("target dimensions must be positive")
        if self.n_points < self.n_keypoints:
            raise ValueError("need at least as many surface points as keypoints")

    def to_dict(self) -> dict:
        return {**asdict(self), "body": list(self.body)}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetParams":
        return cls(**{**d, "body": tuple(d["body"])})


TRIANGLES_PER_BOX = 12
N_TRIANGLES = 3 * TRIANGLES_PER_BOX
PART_BODY, PART_PANEL = 0, 1


def box_triangles(lo, hi) -> np.ndarray:
    """12 outward-facing (counter-clockwise seen from outside) triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=np.float64)
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris.append(v[[a, b, c]])
        tris.append(v[[a, c, d]])
    return np.array(tris)


@dataclass
class TargetModel:
    params: TargetParams
    triangles: np.ndarray        # T x 3 x 3, object frame
    parts: np.ndarray            # T, PART_BODY or PART_PANEL
    points: np.ndarray           # surface samples
    point_tris: np.ndarray       # triangle index of every sample
    keypoints: KeypointSet

    @property
    def normals(self) -> np.ndarray:
        n = np.cross(self.triangles[:, 1] - self.triangles[:, 0], self.triangles[:, 2] - self.triangles[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def diameter(self) -> float:
        v = self.triangles.reshape(-1, 3)
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def build_target(params: TargetParams = TargetParams()) -> TargetModel:
    bx, by, bz = params.body
    body = box_triangles((-bx / 2, -by / 2, -bz / 2), (bx / 2, by / 2, bz / 2))
    root = bx / 2 + params.panel_gap
    tip = root + params.panel_length
    w, t = params.panel_width / 2, params.panel_thickness / 2
    right = box_triangles((root, -w, -t), (tip, w, t))
    left = box_triangles((-tip, -w, -t), (-root, w, t))
    tris = np.concatenate([body, right, left])
    parts = np.array([PART_BODY] * TRIANGLES_PER_BOX + [PART_PANEL] * 2 * TRIANGLES_PER_BOX)

    rng = np.random.default_rng(params.seed)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    idx = rng.choice(len(tris), size=params.n_points, p=areas / areas.sum())
    r1, r2 = rng.random(params.n_points), rng.random(params.n_points)
    s = np.sqrt(r1)
    a, b, c = 1 - s, s * (1 - r2), s * r2
    pts = a[:, None] * tris[idx, 0] + b[:, None] * tris[idx, 1] + c[:, None] * tris[idx, 2]
    return TargetModel(params, tris, parts, pts, idx, fps_select(pts, params.n_keypoints))


# ---------------------------------------------------------------- pose sampling

def sample_pose(rng: np.random.Generator, rig: StereoRig | None = None, depth_range=(10.0, 50.0),
                image_fraction: float = 0.25) -> Pose:
    """Uniform depth, uniform rotation, centre projected within the central image region.

    The centre's horizontal position is drawn so that it projects inside
    both the left and the right image.
    """
    z_min, z_max = depth_range
    if not 0 < z_min < z_max:
        raise ValueError("need 0 < z_min < z_max")
    rig = rig or desk_rig()
    K = rig.intrinsics
    z = rng.uniform(z_min, z_max)
    d = K.fx * rig.baseline / z
    u_lo = max(K.cx - image_fraction * K.width, d)
    u_hi = min(K.cx + image_fraction * K.width, K.width - 1)
    if u_lo >= u_hi:
        raise ValueError("no horizontal position keeps the target in both frusta")
    u = rng.uniform(u_lo, u_hi)
    v = rng.uniform(K.cy - image_fraction * K.height, K.cy + image_fraction * K.height)
    t = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return Pose(random_rotation(rng), t)


# ---------------------------------------------------------------- rendering

@dataclass
class SceneSample:
    left: np.ndarray
    right: np.ndarray
    disparity: DisparityMap
    mask: np.ndarray
    pose: Pose
    illumination: str
    noise: str
    rig: StereoRig
    sample_id: str = ""
    seed: int = 0
    split: str = "train"
    depth: np.ndarray | None = None
    noc_mask: np.ndarray | None = None


@dataclass(frozen=True)
class Lighting:
    ambient: float
    sun: float
    sun_dir: np.ndarray          # unit vector toward the light, camera frame
    hemi: float = 0.0
    hemi_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))


def lighting_for(illumination: str, rng: np.random.Generator) -> Lighting:
    """Shading recipe per regime; only their relative brightness is meaningful."""
    if illumination not in ILLUMINATIONS:
        raise ValueError(f"unknown illumination {illumination!r}")
    # light from the camera's hemisphere so visible faces are mostly lit
    sun = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), -1.0])
    sun /= np.linalg.norm(sun)
    up = np.array([rng.uniform(-0.3, 0.3), -1.0, rng.uniform(-0.5, 0.0)])
    up /= np.linalg.norm(up)
    if illumination == "direct_solar":
        return Lighting(ambient=0.02, sun=1.0, sun_dir=sun)
    if illumination == "earth_albedo":
        return Lighting(ambient=0.04, sun=0.0, sun_dir=sun, hemi=0.35, hemi_dir=up)
    if illumination == "penumbra":
        return Lighting(ambient=0.01, sun=0.02, sun_dir=sun)
    return Lighting(ambient=0.03, sun=0.6, sun_dir=sun, hemi=0.2, hemi_dir=up)


def _albedo(model: TargetModel, tri_index: np.ndarray, p_obj: np.ndarray) -> np.ndarray:
    """RGB albedo: gold foil body with a faint checker, blue panels with a cell grid."""
    part = model.parts[tri_index]
    out = np.empty(tri_index.shape + (3,))
    body = part == PART_BODY
    check = (np.floor(p_obj[..., 0] / 0.4) + np.floor(p_obj[..., 1] / 0.4) + np.floor(p_obj[..., 2] / 0.4)) % 2
    out[body] = np.array([0.85, 0.68, 0.32]) * (0.85 + 0.15 * check[body])[:, None]
    cell = 0.25
    fx = np.abs((p_obj[..., 0] / cell) - np.round(p_obj[..., 0] / cell))
    fy = np.abs((p_obj[..., 1] / cell) - np.round(p_obj[..., 1] / cell))
    line = (np.minimum(fx, fy) < 0.08)[~body]
    out[~body] = np.where(line[:, None], np.array([0.55, 0.6, 0.7]), np.array([0.12, 0.2, 0.5]))
    return out


def shade(model: TargetModel, pose: Pose, K, depth, valid, tri_index, light: Lighting) -> np.ndarray:
    h, w = depth.shape
    img = np.zeros((h, w, 3))
    if not valid.any():
        return img
    v, u = np.nonzero(valid)
    rays = pixel_rays(K, u.astype(np.float64), v.astype(np.float64))
    p_cam = rays * depth[v, u][:, None]
    p_obj = (p_cam - pose.t) @ pose.R
    tri = tri_index[v, u]
    n = model.normals[tri] @ pose.R.T
    facing = np.sign(-(n * p_cam).sum(axis=1))
    n = n * np.where(facing == 0, 1.0, facing)[:, None]
    lum = light.ambient + light.sun * np.maximum(0.0, n @ light.sun_dir)
    if light.hemi:
        lum = lum + light.hemi * (0.5 + 0.5 * (n @ light.hemi_dir))
    img[v, u] = np.clip(_albedo(model, tri, p_obj) * lum[:, None], 0.0, 1.0)
    return img


def occlusion_mask(disp: DisparityMap, right_depth: np.ndarray, right_valid: np.ndarray, rig: StereoRig,
                   rel_tol: float = 1e-2) -> np.ndarray:
    """Left pixels whose surface is also the nearest surface in the right view."""
    h, w = disp.values.shape
    v, u = np.nonzero(disp.valid)
    ur = np.round(u - disp.values[v, u]).astype(int)
    ok = (ur >= 0) & (ur < w)
    out = np.zeros((h, w), dtype=bool)
    z_left = rig.intrinsics.fx * rig.baseline / disp.values[v[ok], u[ok]]
    zr = right_depth[v[ok], ur[ok]]
    out[v[ok], u[ok]] = right_valid[v[ok], ur[ok]] & (np.abs(zr - z_left) <= rel_tol * z_left)
    return out


def render_sample(model: TargetModel, pose: Pose, rig: StereoRig, illumination: str = "direct_solar",
                  noise: str = "none", seed: int = 0, noise_specs: dict | None = None) -> SceneSample:
    K = rig.intrinsics
    depth, valid, tri = rasterize_depth(model.triangles, pose, K)
    if not valid.any():
        raise ValueError("target fully outside the left image")
    r_pose = rig.right_pose(pose)
    r_depth, r_valid, r_tri = rasterize_depth(model.triangles, r_pose, K)
    if not r_valid.any():
        raise ValueError("target fully outside the right image")
    rng = np.random.default_rng(seed)
    light = lighting_for(illumination, rng)
    left = shade(model, pose, K, depth, valid, tri, light)
    right = shade(model, r_pose, K, r_depth, r_valid, r_tri, light)
    specs = noise_specs or DEFAULT_NOISE
    spec = specs[noise] if noise in specs else NoiseSpec(noise)
    left = degrade(left, spec, seed=seed * 2 + 1)
    right = degrade(right, spec, seed=seed * 2 + 2)
    disp = depth_to_disparity(depth, valid, rig)
    return SceneSample(left, right, disp, valid.copy(), pose, illumination, noise, rig, seed=seed,
                       depth=depth, noc_mask=occlusion_mask(disp, r_depth, r_valid, rig))


def consistency_residual(sample: SceneSample, model: TargetModel) -> float:
    """Max |d - fx B / Z| over the mask, Z re-rendered from the annotated pose.

    Returns ``inf`` when the re-rendered silhouette differs from the mask.
    """
    depth, valid, _ = rasterize_depth(model.triangles, sample.pose, sample.rig.intrinsics)
    if not np.array_equal(valid, sample.mask) or not np.array_equal(sample.disparity.valid, sample.mask):
        return float("inf")
    K = sample.rig.intrinsics
    expected = K.fx * sample.rig.baseline / depth[valid]
    return float(np.max(np.abs(sample.disparity.values[valid] - expected)))


# ---------------------------------------------------------------- dataset on disk

@dataclass(frozen=True)
class DatasetConfig:
    width: int = 160
    height: int = 120
    focal: float = 200.0
    baseline: float = 1.0
    depth_range: tuple = (10.0, 50.0)
    target: TargetParams = TargetParams()

    def rig(self) -> StereoRig:
        return desk_rig(self.width, self.height, self.focal, self.baseline)


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def split_of(index: int, master_seed: int) -> str:
    """Every tenth index (offset by a seed hash) goes to the test split."""
    offset = int(hashlib.sha256(str(master_seed).encode()).hexdigest(), 16) % 10
    return "test" if index % 10 == offset else "train"


def tags_of(index: int) -> tuple[str, str]:
    return ILLUMINATIONS[index % 4], NOISE_TAGS[(index + index // 4) % 4]


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_sample(directory: Path, sample: SceneSample, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_pnm(directory / "left.ppm", sample.left)
    write_pnm(directory / "right.ppm", sample.right)
    disp = np.where(sample.disparity.valid, sample.disparity.values, 0.0)
    write_pfm(directory / "disp.pfm", disp)
    save_tensor(directory / "disp.f64", disp)
    write_pnm(directory / "mask.pgm", sample.mask.astype(np.float64))
    _dump_json(directory / "pose.json", {**sample.pose.to_dict(), "rig": sample.rig.to_dict(),
                                         "illumination": sample.illumination, "noise": sample.noise})
    _dump_json(directory / "meta.json", meta)


def _generate_one(out: Path, i: int, master_seed: int, config: DatasetConfig, model: TargetModel) -> dict:
    rig = config.rig()
    seed = sample_seed(master_seed, i)
    illum, noise = tags_of(i)
    rng = np.random.default_rng(seed)
    sample = None
    for _ in range(20):
        try:
            sample = render_sample(model, sample_pose(rng, rig, config.depth_range), rig, illum, noise, seed)
            break
        except ValueError:
            continue
    if sample is None:
        raise RuntimeError(f"could not place the target in frame for sample {i}")
    sid = f"{i:05d}"
    meta = {"id": sid, "index": i, "seed": seed, "split": split_of(i, master_seed),
            "illumination": illum, "noise": noise, "n_valid": int(sample.mask.sum())}
    write_sample(out / sid, sample, meta)
    return meta


def generate_dataset(out_dir, n_samples: int = DESK_SAMPLES, master_seed: int = 0,
                     config: DatasetConfig = DatasetConfig(), workers: int = 1, progress=None) -> dict:
    """Render ``n_samples`` scenes into ``out_dir`` and write the manifest last.

    Samples depend only on their derived seed, so ``workers > 1`` renders
    them in parallel processes without changing a byte of output.
    """
    if n_samples < 10:
        raise ValueError("need at least 10 samples for a 9:1 split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = config.rig()
    model = build_target(config.target)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_generate_one, out, i, master_seed, config, model) for i in range(n_samples)]
            entries = [f.result() for f in futures]
    else:
        entries = []
        for i in range(n_samples):
            entries.append(_generate_one(out, i, master_seed, config, model))
            if progress is not None:
                progress(i, entries[-1])
    manifest = {
        "format_version": FORMAT_VERSION, "master_seed": master_seed, "n_samples": n_samples,
        "rig": rig.to_dict(), "target": config.target.to_dict(),
        "depth_range": list(config.depth_range), "samples": entries,
        "split_counts": {s: sum(e["split"] == s for e in entries) for s in ("train", "test")},
        "illumination_counts": {t: sum(e["illumination"] == t for e in entries) for t in ILLUMINATIONS},
        "noise_counts": {t: sum(e["noise"] == t for e in entries) for t in NOISE_TAGS},
    }
    _dump_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: manifest missing") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: manifest is not valid JSON") from exc


def load_sample(root, entry: dict, rig: StereoRig) -> SceneSample:
    d = Path(root) / entry["id"]
    sid = entry["id"]
    try:
        left = read_pnm(d / "left.ppm")
        right = read_pnm(d / "right.ppm")
        mask = read_pnm(d / "mask.pgm") > 0.5
        if (d / "disp.f64").exists():
            disp = load_tensor(d / "disp.f64")
        else:
            disp = read_pfm(d / "disp.pfm")
        pose_doc = json.loads((d / "pose.json").read_text())
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"sample {sid}: missing file {exc.filename}") from exc
    except (ValueError, KeyError, IndexError) as exc:
        raise DatasetError(f"sample {sid}: corrupt file ({exc})") from exc
    if disp.shape != mask.shape or left.shape[:2] != mask.shape:
        raise DatasetError(f"sample {sid}: array shapes disagree")
    for key in ("illumination", "noise", "split", "seed"):
        if meta.get(key) != entry.get(key):
            raise DatasetError(f"sample {sid}: meta.json disagrees with manifest on {key!r}")
    return SceneSample(left, right, DisparityMap(disp, mask.copy()), mask, Pose.from_dict(pose_doc),
                       meta["illumination"], meta["noise"], rig, sample_id=sid, seed=meta["seed"],
                       split=meta["split"])


def read_dataset(root, verify: bool = False, split: str | None = None, tol: float = DISPARITY_TOL):
    """Lazily yield samples; with ``verify`` each is re-rendered and checked against its pose."""
    manifest = load_manifest(root)
    rig = StereoRig.from_dict(manifest["rig"])
    if len(manifest["samples"]) != manifest["n_samples"]:
        raise DatasetError("manifest sample count mismatch")
    model = build_target(TargetParams.from_dict(manifest["target"])) if verify else None
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        sample = load_sample(root, entry, rig)
        if verify:
            res = consistency_residual(sample, model)
            if not res <= tol:
                raise DatasetError(f"sample {entry['id']}: disparity/pose residual {res:.3g} px exceeds {tol:g}")
        yield sample


def tree_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
