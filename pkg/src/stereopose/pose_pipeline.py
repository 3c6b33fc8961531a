"""Keypoint-voting pose recovery.

Points vote for each keypoint through predicted offsets, mean shift picks
the dominant mode per keypoint, and a closed-form least-squares fit aligns
the canonical keypoints to the voted ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention
from .evalmetrics import PoseEvalReport, evaluate_pose
from .numkernel import ops
from .numkernel.layers import flatten_params, param, zeros_param
from .numkernel.optim import Adam
from .numkernel.tensor import Tensor, as_tensor, backward, no_grad
from .rigid import Pose, quaternion_to_matrix
from .stereo_geometry import DisparityMap, PointCloud, backproject, disparity_to_depth

DEFAULT_KEYPOINTS = 8
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
N_CLASSES = 2        # background, target


class DegenerateConfigurationError(ValueError):
    """Keypoints do not determine a unique rigid transform."""


# ---------------------------------------------------------------- keypoint selection

@dataclass
class KeypointSet:
    points: np.ndarray   # M x 3, object frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def fps_select(model_points: np.ndarray, m: int = DEFAULT_KEYPOINTS) -> KeypointSet:
    """Greedy farthest-point sampling seeded at the point farthest from the centroid."""
    pts = np.asarray(model_points, dtype=np.float64)
    if m < 1 or len(pts) < m:
        raise ValueError(f"need at least {m} points, have {len(pts)}")
    first = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    chosen = [first]
    dist = np.linalg.norm(pts - pts[first], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return KeypointSet(pts[chosen])


# ---------------------------------------------------------------- voting and clustering

def vote_keypoints(points: np.ndarray, offsets: np.ndarray, indicator: np.ndarray | None = None) -> np.ndarray:
    """Votes ``p_i + of_i^j`` of in-instance points, shaped ``M x n_in x 3``."""
    points = np.asarray(points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape[0] != points.shape[0] or offsets.shape[-1] != 3:
        raise ValueError(f"offsets {offsets.shape} do not match points {points.shape}")
    keep = np.ones(len(points), bool) if indicator is None else np.asarray(indicator, bool)
    votes = points[keep, None, :] + offsets[keep]
    return votes.transpose(1, 0, 2)


@dataclass
class MeanShiftResult:
    centers: np.ndarray      # K x 3, largest cluster first
    labels: np.ndarray       # per vote, index into centers
    sizes: np.ndarray        # votes per cluster
    tie: bool = False        # largest two clusters equal in size

    @property
    def best(self) -> np.ndarray:
        return self.centers[0]


def meanshift(votes: np.ndarray, bandwidth: float, max_iter: int = 100, tol: float = 1e-6,
              max_seeds: int | None = 64) -> MeanShiftResult:
    """Gaussian-kernel mean shift from (a strided subset of) the votes themselves."""
    x = np.asarray(votes, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("mean shift needs a non-empty N x dim vote array")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    stride = 1 if max_seeds is None or len(x) <= max_seeds else int(np.ceil(len(x) / max_seeds))
    modes = x[::stride].copy()
    active = np.ones(len(modes), bool)
    inv = -0.5 / bandwidth ** 2
    for _ in range(max_iter):
        if not active.any():
            break
        cur = modes[active]
        d2 = ((cur[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        w = np.exp(inv * (d2 - d2.min(axis=1, keepdims=True)))
        new = (w @ x) / w.sum(axis=1, keepdims=True)
        shift = np.linalg.norm(new - cur, axis=1)
        modes[active] = new
        idx = np.flatnonzero(active)
        active[idx[shift < tol]] = False

    # merge modes closer than half a bandwidth, strongest support first
    support = (((modes[:, None, :] - x[None]) ** 2).sum(-1) <= bandwidth ** 2).sum(axis=1)
    order = np.argsort(-support, kind="stable")
    centers: list[np.ndarray] = []
    for i in order:
        if all(np.linalg.norm(modes[i] - c) >= bandwidth / 2 for c in centers):
            centers.append(modes[i])
    centers = _polish(np.array(centers), x, inv)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    sizes = np.bincount(labels, minlength=len(centers))
    rank = np.argsort(-sizes, kind="stable")
    remap = np.empty_like(rank)
    remap[rank] = np.arange(len(rank))
    sizes = sizes[rank]
    return MeanShiftResult(centers[rank], remap[labels], sizes, tie=len(sizes) > 1 and sizes[0] == sizes[1])


def _polish(centers: np.ndarray, x: np.ndarray, inv: float, max_iter: int = 2000) -> np.ndarray:
    """Run the surviving modes to a fixed point; the seed loop's tol leaves ~tol/(1-rate) error."""
    for _ in range(max_iter):
        d2 = ((centers[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        w = np.exp(inv * (d2 - d2.min(axis=1, keepdims=True)))
        new = (w @ x) / w.sum(axis=1, keepdims=True)
        done = np.abs(new - centers).max() <= 1e-14 * (1.0 + np.abs(centers).max())
        centers = new
        if done:
            break
    return centers


# ---------------------------------------------------------------- least-squares fit

def _jacobi_eigh(A: np.ndarray, sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a small symmetric matrix."""
    A = np.array(A, dtype=np.float64)
    n = len(A)
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(sweeps):
        off = np.sqrt((np.triu(A, 1) ** 2).sum())
        if off <= 1e-17 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    return np.diag(A).copy(), V


def _horn_matrix(S: np.ndarray) -> np.ndarray:
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    return np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])


def fit_pose(kp_object, kp_camera) -> Pose:
    """Rigid (R, t) minimising sum_j ||kp_camera_j - (R kp_object_j + t)||^2.

    Rotation is the unit quaternion maximising the aligned cross-covariance,
    i.e. the top eigenvector of Horn's symmetric 4x4 matrix. A quaternion is
    always a proper rotation, so no reflection case arises.
    """
    a = np.asarray(kp_object.points if isinstance(kp_object, KeypointSet) else kp_object, dtype=np.float64)
    b = np.asarray(kp_camera, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"keypoint arrays must both be M x 3, got {a.shape} and {b.shape}")
    if len(a) < 3:
        raise DegenerateConfigurationError("need at least 3 keypoints")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    sv = np.linalg.svd(a0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("object keypoints are collinear or coincident")
    S = a0.T @ b0
    vals, vecs = _jacobi_eigh(_horn_matrix(S))
    q = vecs[:, int(np.argmax(vals))]
    R = quaternion_to_matrix(q)
    return Pose(R, cb - R @ ca)


def fit_residual(kp_object, kp_camera, pose: Pose) -> float:
    a = np.asarray(kp_object.points if isinstance(kp_object, KeypointSet) else kp_object)
    return float(np.sqrt(np.mean(np.sum((pose.apply(a) - np.asarray(kp_camera)) ** 2, axis=1))))


# ---------------------------------------------------------------- losses

def keypoint_loss(pred, target, indicator=None) -> Tensor:
    """(1/N) sum_i sum_j ||pred_ij - target_ij|| over in-instance points (N x M x 3)."""
    pred, target = as_tensor(pred), as_tensor(target)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("no points")
    ind = np.ones(n) if indicator is None else np.asarray(indicator, dtype=np.float64)
    dist = ops.norm(pred - target, axis=-1)                          # N x M
    return ops.sum(dist * ind.reshape(n, 1)) * (1.0 / n)


def center_loss(pred, target, indicator=None) -> Tensor:
    """(1/N) sum_i ||pred_i - target_i|| over in-instance points (N x 3)."""
    pred, target = as_tensor(pred), as_tensor(target)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("no points")
    ind = np.ones(n) if indicator is None else np.asarray(indicator, dtype=np.float64)
    return ops.sum(ops.norm(pred - target, axis=-1) * ind) * (1.0 / n)


def focal_loss(confidences, labels, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean of -alpha (1 - p_t)^gamma log p_t with p_t the true-class confidence.

    ``labels`` may be integer class ids (N) or one-hot rows (N x C).
    """
    conf = as_tensor(confidences)
    n, c = conf.shape
    if n == 0:
        raise ValueError("no points")
    lab = np.asarray(labels)
    onehot = lab.astype(np.float64) if lab.ndim == 2 else np.eye(c)[lab.astype(int)]
    p_t = ops.sum(conf * onehot, axis=1)
    p_t = ops.where(p_t.data < 1e-12, Tensor(np.full(n, 1e-12)), p_t)
    term = ops.power(1.0 - p_t, gamma) * ops.log(p_t) if gamma != 0 else ops.log(p_t)
    return ops.mean(term) * (-alpha)


def multitask_loss(l_kp, l_sem, l_ctr, k1: float = 1.0, k2: float = 1.0, k3: float = 1.0):
    if min(k1, k2, k3) < 0:
        raise ValueError("loss weights must be non-negative")
    return l_kp * k1 + l_sem * k2 + l_ctr * k3


# ---------------------------------------------------------------- offset sources

@dataclass
class OracleOffsets:
    """Ground-truth offsets plus isotropic Gaussian noise (metres)."""

    sigma: float = 0.0
    seed: int = 0

    def __call__(self, points, keypoints_cam, colors=None, rng=None):
        exact = keypoints_cam[None, :, :] - points[:, None, :]
        if self.sigma == 0:
            return exact
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        return exact + self.sigma * rng.standard_normal(exact.shape)


def init_pose_head(rng: np.random.Generator, d: int = 16, n_keypoints: int = DEFAULT_KEYPOINTS,
                   hidden: int = 32) -> dict:
    """Stand-in per-point encoders, an ECFT fusion block and a 3-layer MLP head."""
    return {
        "enc_r": {"w": param(rng, (3, d)), "b": zeros_param((d,))},
        "enc_p": {"w": param(rng, (3, d)), "b": zeros_param((d,))},
        "ecft": attention.init_ecft(rng, d),
        "mlp": {"w1": param(rng, (2 * d, hidden)), "b1": zeros_param((hidden,)),
                "w2": param(rng, (hidden, hidden)), "b2": zeros_param((hidden,)),
                "w3": param(rng, (hidden, 3 * n_keypoints + 3 + N_CLASSES), scale=0.01),
                "b3": zeros_param((3 * n_keypoints + 3 + N_CLASSES,))},
    }


def pose_head_forward(params: dict, points, colors, directions=attention.FusionDirections(),
                      scale: float = 1.0):
    """Per-point (keypoint offsets N x M x 3, centre offsets N x 3, class confidences N x C).

    ``points`` are centred and divided by ``scale`` before encoding; offsets
    are predicted in the same normalised units and scaled back.
    """
    pts = Tensor((np.asarray(points) - np.asarray(points).mean(axis=0)) / scale)
    f_p = ops.tanh(ops.matmul(pts, params["enc_p"]["w"]) + params["enc_p"]["b"])
    f_r = ops.tanh(ops.matmul(as_tensor(colors), params["enc_r"]["w"]) + params["enc_r"]["b"])
    fp, fr = attention.ecft(f_p, f_r, params["ecft"], directions)
    mlp = params["mlp"]
    h = ops.relu(ops.matmul(ops.concat([fp, fr], axis=1), mlp["w1"]) + mlp["b1"])
    h = ops.relu(ops.matmul(h, mlp["w2"]) + mlp["b2"])
    out = ops.matmul(h, mlp["w3"]) + mlp["b3"]
    n, n_out = out.shape
    m = (n_out - 3 - N_CLASSES) // 3
    kp = ops.reshape(out[:, :3 * m], (n, m, 3)) * scale
    ctr = out[:, 3 * m:3 * m + 3] * scale
    conf = ops.softmax(out[:, 3 * m + 3:], axis=1)
    return kp, ctr, conf


@dataclass
class HeadOffsets:
    """Offsets predicted by a trained pose head."""

    params: dict
    directions: attention.FusionDirections = field(default_factory=attention.FusionDirections)
    scale: float = 1.0

    def __call__(self, points, keypoints_cam, colors=None, rng=None):
        with no_grad():
            kp, _, _ = pose_head_forward(self.params, points, colors, self.directions, self.scale)
        return kp.data


def pose_head_targets(points, kp_cam, center_cam):
    return kp_cam[None] - points[:, None], center_cam[None] - points


@dataclass
class PoseHeadResult:
    params: dict
    scale: float
    losses: list


def train_pose_head(batches: list[dict], steps: int, seed: int = 0, lr: float = 3e-3, d: int = 16,
                    directions=attention.FusionDirections(), log=None) -> PoseHeadResult:
    """Fit the head on ``{points, colors, kp_cam, center_cam, labels}`` batches with the multitask loss."""
    if not batches:
        raise ValueError("empty dataset")
    m = len(batches[0]["kp_cam"])
    rng = np.random.default_rng(seed)
    params = init_pose_head(rng, d=d, n_keypoints=m)
    scale = float(np.mean([np.linalg.norm(b["points"] - b["points"].mean(0), axis=1).max() for b in batches]))
    opt = Adam(flatten_params(params), lr=lr)
    losses = []
    for step in range(steps):
        b = batches[step % len(batches)]
        opt.zero_grad()
        kp, ctr, conf = pose_head_forward(params, b["points"], b["colors"], directions, scale)
        kp_t, ctr_t = pose_head_targets(b["points"], b["kp_cam"], b["center_cam"])
        ind = b["labels"] == 1
        loss = multitask_loss(keypoint_loss(kp, kp_t, ind), focal_loss(conf, b["labels"]),
                              center_loss(ctr, ctr_t, ind))
        backward(loss)
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return PoseHeadResult(params, scale, losses)


# ---------------------------------------------------------------- end to end

@dataclass
class PoseConfig:
    n_keypoints: int = DEFAULT_KEYPOINTS
    bandwidth: float | None = None      # default: 5 % of the model diameter
    max_points: int | None = 256
    max_seeds: int | None = 64
    seed: int = 0


@dataclass
class PoseEstimate:
    pose: Pose
    report: PoseEvalReport
    keypoints_cam: np.ndarray
    n_points: int
    ties: int = 0


def model_diameter(points: np.ndarray) -> float:
    lo, hi = points.min(axis=0), points.max(axis=0)
    return float(np.linalg.norm(hi - lo))


def cloud_from_sample(sample, disparity: DisparityMap | None = None) -> PointCloud:
    """Instance point cloud from a sample's (or a predicted) disparity map."""
    disp = sample.disparity if disparity is None else disparity
    depth, valid = disparity_to_depth(DisparityMap(disp.values, disp.valid & sample.mask), sample.rig)
    cloud = backproject(depth, valid, sample.rig.intrinsics)
    cloud.labels = np.ones(len(cloud), dtype=int)
    if getattr(sample, "left", None) is not None:
        u, v = cloud.pixels[:, 0].astype(int), cloud.pixels[:, 1].astype(int)
        img = sample.left if sample.left.ndim == 3 else sample.left[..., None].repeat(3, axis=2)
        cloud.extra["colors"] = img[v, u]
    return cloud


def estimate_pose(sample, kp_object: KeypointSet, offset_source, config: PoseConfig = PoseConfig(),
                  diameter: float | None = None, disparity: DisparityMap | None = None) -> PoseEstimate:
    """Vote, cluster and fit; ``sample`` supplies disparity, mask, rig and the GT pose."""
    cloud = cloud_from_sample(sample, disparity)
    rng = np.random.default_rng(config.seed)
    idx = np.arange(len(cloud))
    if config.max_points is not None and len(idx) > config.max_points:
        idx = np.sort(rng.choice(len(idx), size=config.max_points, replace=False))
    points = cloud.points[idx]
    indicator = cloud.labels[idx] == 1
    colors = cloud.extra.get("colors")
    colors = colors[idx] if colors is not None else None
    kp_cam_true = sample.pose.apply(kp_object.points)
    offsets = offset_source(points, kp_cam_true, colors, rng)
    votes = vote_keypoints(points, offsets, indicator)
    if votes.shape[1] == 0:
        raise DegenerateConfigurationError("no in-instance points to vote")
    if diameter is None:
        diameter = model_diameter(kp_object.points)
    bandwidth = config.bandwidth if config.bandwidth is not None else 0.05 * diameter
    kp_cam, ties = [], 0
    for j in range(votes.shape[0]):
        ms = meanshift(votes[j], bandwidth, max_seeds=config.max_seeds)
        kp_cam.append(ms.best)
        ties += int(ms.tie)
    kp_cam = np.array(kp_cam)
    if len(kp_cam) < 3:
        raise DegenerateConfigurationError("fewer than 3 keypoints recovered")
    pose = fit_pose(kp_object, kp_cam)
    report = evaluate_pose(sample.pose.R, sample.pose.t, pose.R, pose.t)
    return PoseEstimate(pose, report, kp_cam, len(points), ties)


def direct_monte_carlo(kp_object: KeypointSet, pose: Pose, sigma: float, n_votes: int,
                       rng: np.random.Generator) -> PoseEvalReport:
    """Fit to GT keypoints perturbed as a mean of ``n_votes`` noisy votes would be.

    Cross-check for the voting chain: with a bandwidth much wider than
    ``sigma`` the mean-shift mode is close to the vote mean, whose error is
    N(0, sigma^2 / n_votes) per axis.
    """
    if n_votes < 1:
        raise ValueError("need at least one vote")
    kp_cam = pose.apply(kp_object.points)
    noisy = kp_cam + rng.standard_normal(kp_cam.shape) * (sigma / np.sqrt(n_votes))
    fit = fit_pose(kp_object, noisy)
    return evaluate_pose(pose.R, pose.t, fit.R, fit.t)
