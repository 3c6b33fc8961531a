"""Disparity and pose error metrics.

Disparity metrics are taken over the valid mask only. Threshold metrics use a
strict ``>`` so an error exactly at the threshold is an inlier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rigid import is_rotation

DEFAULT_TAUS = (1.0, 2.0, 3.0)


def _errors(D, D_gt, mask) -> tuple[np.ndarray, np.ndarray]:
    D = np.asarray(D, dtype=np.float64)
    D_gt = np.asarray(D_gt, dtype=np.float64)
    if D.shape != D_gt.shape:
        raise ValueError(f"prediction {D.shape} and ground truth {D_gt.shape} differ")
    mask = np.ones(D.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != D.shape:
        raise ValueError("mask shape differs from disparity shape")
    if not mask.any():
        raise ValueError("empty valid mask")
    return (D - D_gt)[mask], D_gt[mask]


def epe(D, D_gt, mask=None) -> float:
    err, _ = _errors(D, D_gt, mask)
    return float(np.mean(np.abs(err)))


def rmse(D, D_gt, mask=None) -> float:
    err, _ = _errors(D, D_gt, mask)
    return float(np.sqrt(np.mean(err * err)))


def bad_tau(D, D_gt, mask=None, tau: float = 3.0) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    err, _ = _errors(D, D_gt, mask)
    return float(np.mean(np.abs(err) > tau))


def d1(D, D_gt, mask=None) -> float:
    """Outlier rate: error above 3 px and above 5 % of the true disparity."""
    err, gt = _errors(D, D_gt, mask)
    if np.any(gt <= 0):
        raise ValueError("D1 needs positive ground-truth disparity on valid pixels")
    a = np.abs(err)
    return float(np.mean((a > 3.0) & (a > 0.05 * gt)))


@dataclass
class DisparityEvalReport:
    epe: float
    rmse: float
    bad: dict = field(default_factory=dict)
    d1: float = 0.0
    n: int = 0

    def as_record(self) -> dict:
        rec = {"epe": self.epe, "rmse": self.rmse, "d1": self.d1, "n": self.n}
        for tau, v in sorted(self.bad.items()):
            rec[f"bad_{tau:g}"] = v
        return rec

    def text(self) -> str:
        return "\n".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in self.as_record().items())


def evaluate_disparity(D, D_gt, mask=None, taus=DEFAULT_TAUS) -> DisparityEvalReport:
    _, gt = _errors(D, D_gt, mask)
    return DisparityEvalReport(
        epe=epe(D, D_gt, mask), rmse=rmse(D, D_gt, mask),
        bad={float(t): bad_tau(D, D_gt, mask, t) for t in taus},
        d1=d1(D, D_gt, mask), n=int(gt.size))


def aggregate_disparity(reports: list[DisparityEvalReport]) -> DisparityEvalReport:
    """Pixel-weighted pooling of per-sample reports (equals the metric over the union)."""
    n = np.array([r.n for r in reports], dtype=np.float64)
    if n.sum() == 0:
        raise ValueError("no pixels to aggregate")
    w = n / n.sum()
    taus = reports[0].bad.keys()
    return DisparityEvalReport(
        epe=float(np.dot(w, [r.epe for r in reports])),
        rmse=float(np.sqrt(np.dot(w, [r.rmse ** 2 for r in reports]))),
        bad={t: float(np.dot(w, [r.bad[t] for r in reports])) for t in taus},
        d1=float(np.dot(w, [r.d1 for r in reports])),
        n=int(n.sum()))


# ---------------------------------------------------------------- pose

def translation_error(t, t_hat) -> float:
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64) - np.asarray(t_hat, dtype=np.float64)))


def rotation_error(R, R_hat) -> float:
    """Geodesic angle in radians between two rotations.

    Same value as ``arccos((tr(R^T R_hat) - 1) / 2)`` but evaluated as
    ``atan2(sin, cos)``: the bare arccos resolves nothing below ~1e-8 rad.
    """
    R = np.asarray(R, dtype=np.float64)
    R_hat = np.asarray(R_hat, dtype=np.float64)
    if not (is_rotation(R) and is_rotation(R_hat)):
        raise ValueError("rotation_error expects proper rotation matrices")
    M = R.T @ R_hat
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.arctan2(s, c))


@dataclass
class PoseEvalReport:
    e_t: float
    e_R: float

    @property
    def e_R_deg(self) -> float:
        return float(np.degrees(self.e_R))

    def as_record(self) -> dict:
        return {**asdict(self), "e_R_deg": self.e_R_deg}


def evaluate_pose(R, t, R_hat, t_hat) -> PoseEvalReport:
    return PoseEvalReport(translation_error(t, t_hat), rotation_error(R, R_hat))
