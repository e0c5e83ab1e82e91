"""Evaluation metrics: PSNR, SSIM, gauge-aligned rotation error and ATE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAlignment
from .geomcore import project_to_so3, rotation_angle
from .splatrender import ssim as _ssim

PSNR_CAP_DB = 99.0


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio for images on a [0, 1] range, capped at ``cap`` dB."""
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return float(-10.0 * np.log10(mse))


def ssim(a, b) -> float:
    return float(_ssim(a, b))


@dataclass(frozen=True)
class RotationErrors:
    per_camera: np.ndarray  # degrees
    mean: float
    median: float


def _rotations(poses):
    return [np.asarray(getattr(p, "R", p), dtype=float) for p in poses]


def rotation_error(estimated, ground_truth) -> RotationErrors:
    """Per-camera geodesic angle after the best global rotation alignment.

    The alignment ``G`` maximizes ``sum tr(R_gt (R_est G)^T)`` (chordal L2 mean),
    which removes the global gauge of a world-to-camera trajectory.
    """
    est, gt = _rotations(estimated), _rotations(ground_truth)
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    G = project_to_so3(sum(Re.T @ Rg for Re, Rg in zip(est, gt)))
    errs = np.array([np.degrees(rotation_angle(Rg @ (Re @ G).T)) for Re, Rg in zip(est, gt)])
    return RotationErrors(errs, float(errs.mean()), float(np.median(errs)))


def umeyama(src, dst, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``sum ||s R src + t - dst||^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs**2).sum() / n
    if var_s <= 0:
        raise DegenerateAlignment("source points coincide")
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _centers(poses):
    out = []
    for p in poses:
        if hasattr(p, "center"):
            out.append(p.center)
        else:
            out.append(np.asarray(p, dtype=float))
    return np.array(out)


def ate(estimated, ground_truth) -> float:
    """RMS camera-center distance after similarity alignment of estimated onto ground truth.

    Accepts poses or raw 3-vector centers. Needs at least three non-collinear centers.
    """
    est, gt = _centers(estimated), _centers(ground_truth)
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    if len(est) < 3:
        raise DegenerateAlignment("need at least 3 cameras")
    sv = np.linalg.svd(est - est.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateAlignment("camera centers are collinear")
    s, R, t = umeyama(est, gt)
    aligned = s * est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))


def align_similarity(estimated_points, gt_points):
    """Apply the Umeyama alignment of ``estimated_points`` onto ``gt_points`` and return the result."""
    s, R, t = umeyama(estimated_points, gt_points)
    return s * np.asarray(estimated_points) @ R.T + t
