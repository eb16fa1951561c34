"""Projective geometry primitives shared by the reconstruction stages.

Camera model: world point X maps to camera coordinates x = R (X - c) with
world-to-camera rotation R and center c; pixels are (fx x/z + cx,
fy y/z + cy). Relative pose between views i and j follows
R_ij = R_j R_i^T with the unit baseline direction expressed in frame j.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .viewgraph import CameraIntrinsics

P3P_INLIER_THRESHOLD_PX = 4.0
P3P_CONFIDENCE = 0.999
P3P_MAX_ITERATIONS = 1000
MIN_TRIANGULATION_ANGLE_DEG = 1.0


def project(
    rotation: np.ndarray, center: np.ndarray, intr: CameraIntrinsics, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project points (n, 3) to pixels (n, 2); also returns the depths."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = (pts - center) @ rotation.T
    z = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * x[:, 0] / z + intr.cx
        v = intr.fy * x[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def pixel_to_ray(intr: CameraIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Unit viewing ray in camera coordinates for a pixel."""
    d = np.array([(pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0])
    return d / np.linalg.norm(d)


def triangulation_angle_deg(
    rotations: Sequence[np.ndarray], centers: Sequence[np.ndarray], point: np.ndarray
) -> float:
    """Maximum pairwise angle between the rays from the camera centers to
    the point, in degrees."""
    rays = []
    for c in centers:
        r = point - c
        n = np.linalg.norm(r)
        if n < 1e-15:
            return 0.0
        rays.append(r / n)
    best = 0.0
    for a in range(len(rays)):
        for b in range(a + 1, len(rays)):
            cosang = np.clip(np.dot(rays[a], rays[b]), -1.0, 1.0)
            best = max(best, float(np.degrees(np.arccos(cosang))))
    return best


def triangulate_point(
    rotations: Sequence[np.ndarray],
    centers: Sequence[np.ndarray],
    intrinsics: Sequence[CameraIntrinsics],
    pixels: Sequence[np.ndarray],
) -> Optional[np.ndarray]:
    """Linear multi-view triangulation (homogeneous least squares).

    Returns the point, or None when the linear system is degenerate. No
    acceptance thresholds here; callers check reprojection, cheirality and
    parallax themselves.
    """
    rows = []
    for R, c, intr, px in zip(rotations, centers, intrinsics, pixels):
        P = intr.K @ np.hstack([R, (-R @ np.asarray(c, dtype=float)).reshape(3, 1)])
        rows.append(px[0] * P[2] - P[0])
        rows.append(px[1] * P[2] - P[1])
    A = np.asarray(rows)
    if A.shape[0] < 4:
        return None
    _, S, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * max(np.linalg.norm(X[:3]), 1e-300):
        return None
    return X[:3] / X[3]


class RegistrationResult:
    __slots__ = ("rotation", "center", "inlier_mask", "iterations")

    def __init__(self, rotation, center, inlier_mask, iterations):
        self.rotation = rotation
        self.center = center
        self.inlier_mask = inlier_mask
        self.iterations = iterations

    @property
    def num_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def register_p3p_ransac(
    points3d: np.ndarray,
    pixels: np.ndarray,
    intr: CameraIntrinsics,
    seed: int = 0,
    threshold_px: float = P3P_INLIER_THRESHOLD_PX,
    confidence: float = P3P_CONFIDENCE,
    max_iterations: int = P3P_MAX_ITERATIONS,
) -> Optional[RegistrationResult]:
    """Absolute pose from 2D-3D matches: minimal 3-point hypotheses inside
    a seeded RANSAC loop, refined on the consensus set.

    Returns None when no hypothesis reaches 4 inliers.
    """
    points3d = np.ascontiguousarray(points3d, dtype=np.float64)
    pixels = np.ascontiguousarray(pixels, dtype=np.float64)
    n = points3d.shape[0]
    if n < 4:
        return None
    K = intr.K
    dist = np.zeros(4)
    rng = np.random.default_rng(seed)
    best_mask = None
    best_pose = None
    best_count = 3
    it = 0
    needed = max_iterations
    while it < needed and it < max_iterations:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        ok, rvecs, tvecs = cv2.solveP3P(
            points3d[sample], pixels[sample], K, dist, flags=cv2.SOLVEPNP_P3P
        )
        if not ok:
            continue
        for rvec, tvec in zip(rvecs, tvecs):
            R, _ = cv2.Rodrigues(rvec)
            t = tvec.reshape(3)
            c = -R.T @ t
            proj, z = project(R, c, intr, points3d)
            err = np.linalg.norm(proj - pixels, axis=1)
            mask = (z > 0) & (err < threshold_px)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_pose = (R, c)
                ratio = count / n
                denom = np.log(max(1.0 - ratio**3, 1e-12))
                needed = min(
                    max_iterations, int(np.ceil(np.log(1.0 - confidence) / denom))
                )
    if best_mask is None:
        return None
    # iterative refinement on the consensus set
    R, c = best_pose
    rvec, _ = cv2.Rodrigues(R)
    tvec = (-R @ c).reshape(3, 1)
    ok, rvec, tvec = cv2.solvePnP(
        points3d[best_mask],
        pixels[best_mask],
        K,
        dist,
        rvec=rvec,
        tvec=tvec,
        useExtrinsicGuess=True,
        flags=cv2.SOLVEPNP_ITERATIVE,
    )
    if ok:
        R, _ = cv2.Rodrigues(rvec)
        c = -R.T @ tvec.reshape(3)
        proj, z = project(R, c, intr, points3d)
        err = np.linalg.norm(proj - pixels, axis=1)
        mask = (z > 0) & (err < threshold_px)
        if mask.sum() >= best_mask.sum():
            best_mask = mask
            best_pose = (R, c)
    R, c = best_pose
    return RegistrationResult(R, np.asarray(c, dtype=float), best_mask, it)


def solve_centers_from_directions(
    rotations: Dict[int, np.ndarray],
    directions: Dict[Tuple[int, int], np.ndarray],
) -> Dict[int, np.ndarray]:
    """Camera centers from pairwise baseline directions by least squares.

    Each edge (i, j) carries the unit baseline direction in frame j,
    pointing along c_i - c_j. In the world frame the constraint is the
    vanishing cross product d_ij x (c_i - c_j) = 0; the stacked homogeneous
    system is solved by SVD with the first view's center pinned at the
    origin and the mean baseline normalized to one. The sign ambiguity is
    resolved so most edges agree with their direction (not just its line).

    Raises ValueError when the translation system is rank deficient
    (e.g. all cameras and directions collinear) or the direction graph does
    not connect all views.
    """
    views = sorted(rotations)
    if len(views) < 2:
        raise ValueError("need at least two views")
    # connectivity check, reporting the components when it fails
    parent = {v: v for v in views}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (i, j) in directions:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    comps: Dict[int, List[int]] = {}
    for v in views:
        comps.setdefault(find(v), []).append(v)
    if len(comps) > 1:
        raise ValueError(
            f"direction graph is disconnected; translation components: {sorted(comps.values())}"
        )

    col = {v: 3 * k for k, v in enumerate(views[1:])}
    n_unknown = 3 * (len(views) - 1)
    rows = []
    edge_list = sorted(directions)
    for (i, j) in edge_list:
        d_world = rotations[j].T @ np.asarray(directions[(i, j)], dtype=float)
        Dx = np.array(
            [
                [0.0, -d_world[2], d_world[1]],
                [d_world[2], 0.0, -d_world[0]],
                [-d_world[1], d_world[0], 0.0],
            ]
        )
        block = np.zeros((3, n_unknown))
        if i in col:
            block[:, col[i] : col[i] + 3] += Dx
        if j in col:
            block[:, col[j] : col[j] + 3] -= Dx
        rows.append(block)
    A = np.vstack(rows)
    _, S, Vt = np.linalg.svd(A, full_matrices=False)
    if S[-2] < 1e-9 * max(S[0], 1e-300):
        raise ValueError("rank-deficient center system (degenerate direction geometry)")
    x = Vt[-1]
    centers = {views[0]: np.zeros(3)}
    for v in views[1:]:
        centers[v] = x[col[v] : col[v] + 3].copy()
    # orientation: the majority of edges must point along, not against, d
    votes = 0.0
    for (i, j) in edge_list:
        d_world = rotations[j].T @ np.asarray(directions[(i, j)], dtype=float)
        votes += float(np.dot(centers[i] - centers[j], d_world))
    if votes < 0:
        centers = {v: -c for v, c in centers.items()}
    baselines = [np.linalg.norm(centers[i] - centers[j]) for (i, j) in edge_list]
    mean_b = float(np.mean(baselines))
    if mean_b < 1e-12:
        raise ValueError("rank-deficient center system (all centers collapse)")
    return {v: c / mean_b for v, c in centers.items()}
