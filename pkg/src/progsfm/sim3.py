"""Similarity transforms of 3-space and their robust estimation from
point correspondences.

A transform acts as x -> s * R @ x + t. Estimation follows the classic
closed form (SVD of the centered cross-covariance); the RANSAC wrapper
draws minimal 3-point samples and refits on the consensus set.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import so3

RANSAC_CONFIDENCE = 0.999
RANSAC_MAX_ITERATIONS = 1000
# inlier threshold as a fraction of the destination point-set diameter
RANSAC_THRESHOLD_FRACTION = 0.02


@dataclass
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        so3.check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (n, 3)."""
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def compose(self, other: "Sim3") -> "Sim3":
        """self after other: (self @ other).apply(x) == self.apply(other.apply(x))."""
        return Sim3(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Sim3":
        Rt = self.rotation.T
        return Sim3(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def to_vector(self) -> np.ndarray:
        """7-vector (log R, t, log s) used by the pose-graph optimizer."""
        return np.concatenate(
            [so3.so3_log(self.rotation), self.translation, [np.log(self.scale)]]
        )

    @staticmethod
    def from_vector(v: np.ndarray) -> "Sim3":
        v = np.asarray(v, dtype=float).reshape(7)
        return Sim3(float(np.exp(v[6])), so3.so3_exp(v[:3]), v[3:6].copy())


def fit_sim3(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Closed-form least-squares similarity with dst ~ s R src + t.

    Requires >= 3 non-collinear correspondences; raises ValueError on a
    degenerate configuration (rank-deficient cross-covariance or zero
    spread in the source).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"need matching (n, 3) arrays, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError("at least 3 correspondences required")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = np.sum(xs * xs) / n
    if var_s < 1e-18:
        raise ValueError("source points are coincident")
    H = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise ValueError("degenerate (collinear) correspondence configuration")
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    if s <= 0:
        raise ValueError("non-positive scale from degenerate configuration")
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


@dataclass
class Sim3RansacResult:
    transform: Sim3
    inlier_mask: np.ndarray
    threshold: float
    iterations: int
    rms_inlier_error: float = field(default=0.0)


def _point_diameter(points: np.ndarray) -> float:
    """Diameter proxy: twice the max distance from the centroid (exact for
    the criterion's purpose and O(n))."""
    c = points.mean(axis=0)
    return 2.0 * float(np.max(np.linalg.norm(points - c, axis=1)))


def ransac_sim3(
    src: np.ndarray,
    dst: np.ndarray,
    threshold: Optional[float] = None,
    seed: int = 0,
    confidence: float = RANSAC_CONFIDENCE,
    max_iterations: int = RANSAC_MAX_ITERATIONS,
) -> Optional[Sim3RansacResult]:
    """Robust similarity estimation with minimal 3-point hypotheses.

    The inlier threshold defaults to a fixed fraction of the destination
    diameter. Returns None when no hypothesis gathers 3 inliers or all
    samples are degenerate. Deterministic for a fixed seed.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = src.shape[0]
    if n < 3:
        return None
    if threshold is None:
        threshold = RANSAC_THRESHOLD_FRACTION * _point_diameter(dst)
        if threshold <= 0:
            return None
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 2
    it = 0
    needed = max_iterations
    while it < needed and it < max_iterations:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            T = fit_sim3(src[sample], dst[sample])
        except ValueError:
            continue
        err = np.linalg.norm(T.apply(src) - dst, axis=1)
        mask = err < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            # standard adaptive stopping on the inlier ratio
            ratio = count / n
            denom = np.log(max(1.0 - ratio**3, 1e-12))
            needed = min(max_iterations, int(np.ceil(np.log(1.0 - confidence) / denom)))
    if best_mask is None:
        return None
    # refit on the consensus set, then re-evaluate the mask once
    T = fit_sim3(src[best_mask], dst[best_mask])
    err = np.linalg.norm(T.apply(src) - dst, axis=1)
    mask = err < threshold
    if mask.sum() >= 3:
        T = fit_sim3(src[mask], dst[mask])
        err = np.linalg.norm(T.apply(src) - dst, axis=1)
        mask = err < threshold
    else:
        mask = best_mask
    rms = float(np.sqrt(np.mean(err[mask] ** 2))) if mask.any() else float("inf")
    return Sim3RansacResult(
        transform=T,
        inlier_mask=mask,
        threshold=float(threshold),
        iterations=it,
        rms_inlier_error=rms,
    )
