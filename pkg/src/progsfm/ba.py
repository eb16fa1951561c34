"""Sparse Levenberg-Marquardt bundle adjustment.

Minimizes total squared pixel reprojection error over camera poses and
3D points with analytic Jacobians (evaluated by the kernels backend).
Pose updates are right-multiplicative on the rotation, additive on the
center. The gauge is fixed by freezing a caller-chosen set of views;
scale gauge handling (baseline renormalization) is left to callers since
it does not change the cost.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import kernels, so3
from .viewgraph import CameraIntrinsics

MAX_ITERATIONS = 50
RELATIVE_COST_TOL = 1e-8


@dataclass
class BundleReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_history: List[float] = field(default_factory=list)


def _pack(observations):
    cam_ids = sorted({v for v, _, _ in observations})
    pt_ids = sorted({p for _, p, _ in observations})
    cam_index = {v: k for k, v in enumerate(cam_ids)}
    pt_index = {p: k for k, p in enumerate(pt_ids)}
    cam_idx = np.array([cam_index[v] for v, _, _ in observations], dtype=np.int64)
    pt_idx = np.array([pt_index[p] for _, p, _ in observations], dtype=np.int64)
    obs = np.array([px for _, _, px in observations], dtype=np.float64).reshape(-1, 2)
    return cam_ids, pt_ids, cam_idx, pt_idx, obs


def reprojection_cost(
    poses: Dict[int, Tuple[np.ndarray, np.ndarray]],
    points: Dict[int, np.ndarray],
    observations: Sequence[Tuple[int, int, np.ndarray]],
    intrinsics: Dict[int, CameraIntrinsics],
) -> float:
    """Sum of squared pixel residuals over all observations."""
    if not observations:
        return 0.0
    cam_ids, pt_ids, cam_idx, pt_idx, obs = _pack(observations)
    Rs = np.array([poses[v][0] for v in cam_ids])
    cs = np.array([poses[v][1] for v in cam_ids])
    intr = np.array([[intrinsics[v].fx, intrinsics[v].fy, intrinsics[v].cx, intrinsics[v].cy] for v in cam_ids])
    pts = np.array([points[p] for p in pt_ids])
    r, _ = kernels.reprojection_residuals(Rs, cs, intr, cam_idx, pts, pt_idx, obs)
    return float(np.sum(r * r))


def bundle_adjust(
    poses: Dict[int, Tuple[np.ndarray, np.ndarray]],
    points: Dict[int, np.ndarray],
    observations: Sequence[Tuple[int, int, np.ndarray]],
    intrinsics: Dict[int, CameraIntrinsics],
    fixed_views: Optional[Set[int]] = None,
    max_iterations: int = MAX_ITERATIONS,
    tol: float = RELATIVE_COST_TOL,
) -> Tuple[Dict[int, Tuple[np.ndarray, np.ndarray]], Dict[int, np.ndarray], BundleReport]:
    """LM refinement of (rotation, center) poses and points.

    observations is a sequence of (view id, point id, pixel). The lowest
    view id is frozen when fixed_views is not given. Accepted steps
    strictly decrease the cost; returns updated copies and a report.
    """
    if not observations:
        return dict(poses), dict(points), BundleReport(0.0, 0.0, 0, True)
    cam_ids, pt_ids, cam_idx, pt_idx, obs = _pack(observations)
    if fixed_views is None:
        fixed_views = {cam_ids[0]}

    Rs = np.array([poses[v][0] for v in cam_ids], dtype=np.float64)
    cs = np.array([poses[v][1] for v in cam_ids], dtype=np.float64)
    intr = np.array(
        [[intrinsics[v].fx, intrinsics[v].fy, intrinsics[v].cx, intrinsics[v].cy] for v in cam_ids],
        dtype=np.float64,
    )
    pts = np.array([points[p] for p in pt_ids], dtype=np.float64)

    free_cams = [k for k, v in enumerate(cam_ids) if v not in fixed_views]
    cam_off = np.full(len(cam_ids), -1, dtype=np.int64)
    for slot, k in enumerate(free_cams):
        cam_off[k] = 6 * slot
    n_cam_params = 6 * len(free_cams)
    pt_off = n_cam_params + 3 * np.arange(len(pt_ids), dtype=np.int64)
    n_params = n_cam_params + 3 * len(pt_ids)
    m = len(observations)

    def build(Rs, cs, pts):
        r, Jc, Jp, z = kernels.reprojection_jacobians(Rs, cs, intr, cam_idx, pts, pt_idx, obs)
        cost = float(np.sum(r * r))
        # sparse Jacobian in COO form: camera blocks then point blocks
        obs_cam_off = cam_off[cam_idx]
        free = obs_cam_off >= 0
        nf = int(free.sum())
        rows_c = np.repeat(np.where(free)[0] * 2, 12) + np.tile(np.repeat([0, 1], 6), nf)
        cols_c = np.repeat(obs_cam_off[free], 12) + np.tile(np.arange(6), 2 * nf)
        data_c = Jc[free].reshape(-1)
        obs_pt_off = pt_off[pt_idx]
        rows_p = np.repeat(np.arange(m) * 2, 6) + np.tile(np.repeat([0, 1], 3), m)
        cols_p = np.repeat(obs_pt_off, 6) + np.tile(np.arange(3), 2 * m)
        data_p = Jp.reshape(-1)
        J = scipy.sparse.coo_matrix(
            (
                np.concatenate([data_c, data_p]),
                (np.concatenate([rows_c, rows_p]), np.concatenate([cols_c, cols_p])),
            ),
            shape=(2 * m, n_params),
        ).tocsr()
        return r.reshape(-1), J, cost

    def apply_step(Rs, cs, pts, delta):
        Rs2, cs2, pts2 = Rs.copy(), cs.copy(), pts.copy()
        for slot, k in enumerate(free_cams):
            d = delta[6 * slot : 6 * slot + 6]
            Rs2[k] = Rs[k] @ so3.so3_exp(d[:3])
            cs2[k] = cs[k] + d[3:]
        pts2 += delta[n_cam_params:].reshape(-1, 3)
        return Rs2, cs2, pts2

    r, J, cost = build(Rs, cs, pts)
    report = BundleReport(cost, cost, 0, False, [cost])
    lam = 1e-4
    identity = scipy.sparse.identity(n_params, format="csr")
    for it in range(1, max_iterations + 1):
        JtJ = (J.T @ J).tocsr()
        g = J.T @ r
        accepted = False
        for _ in range(12):
            try:
                delta = scipy.sparse.linalg.spsolve(JtJ + lam * identity, -g)
            except RuntimeError:
                lam *= 10.0
                continue
            Rs2, cs2, pts2 = apply_step(Rs, cs, pts, delta)
            r2, J2, cost2 = build(Rs2, cs2, pts2)
            if np.isfinite(cost2) and cost2 < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            report.converged = True
            break
        rel_drop = (cost - cost2) / max(cost, 1e-300)
        Rs, cs, pts, r, J, cost = Rs2, cs2, pts2, r2, J2, cost2
        report.cost_history.append(cost)
        report.iterations = it
        lam = max(lam / 3.0, 1e-12)
        if rel_drop < tol:
            report.converged = True
            break
    report.final_cost = cost
    new_poses = dict(poses)
    for k, v in enumerate(cam_ids):
        new_poses[v] = (Rs[k].copy(), cs[k].copy())
    new_points = dict(points)
    for k, p in enumerate(pt_ids):
        new_points[p] = pts[k].copy()
    return new_poses, new_points, report
