"""Vectorized numpy implementation of the reprojection kernels.

Used as the fallback when the compiled extension is unavailable; both
backends implement the identical contract (see kernels.__init__).
"""

import numpy as np


def reprojection_residuals(Rs, cs, intr, cam_idx, pts, pt_idx, obs):
    R = Rs[cam_idx]  # (M,3,3)
    X = pts[pt_idx] - cs[cam_idx]  # (M,3)
    x = np.einsum("mij,mj->mi", R, X)
    z = x[:, 2]
    fx, fy, cx, cy = intr[cam_idx].T
    u = fx * x[:, 0] / z + cx
    v = fy * x[:, 1] / z + cy
    r = np.stack([u, v], axis=1) - obs
    return r, z


def reprojection_jacobians(Rs, cs, intr, cam_idx, pts, pt_idx, obs):
    """Residuals plus analytic Jacobian blocks.

    Camera block columns: 3 for the local rotation update R <- R exp(hat(w)),
    3 for the camera center. Point block: 3 for the point position.
    """
    R = Rs[cam_idx]  # (M,3,3)
    d = pts[pt_idx] - cs[cam_idx]  # (M,3)
    x = np.einsum("mij,mj->mi", R, d)
    z = x[:, 2]
    fx, fy, cx, cy = intr[cam_idx].T
    u = fx * x[:, 0] / z + cx
    v = fy * x[:, 1] / z + cy
    r = np.stack([u, v], axis=1) - obs

    M = len(cam_idx)
    # d(u,v)/dx_cam
    A = np.zeros((M, 2, 3))
    A[:, 0, 0] = fx / z
    A[:, 0, 2] = -fx * x[:, 0] / z**2
    A[:, 1, 1] = fy / z
    A[:, 1, 2] = -fy * x[:, 1] / z**2

    # dx_cam/dX = R, dx_cam/dc = -R, dx_cam/dw = -R hat(d)
    hat_d = np.zeros((M, 3, 3))
    hat_d[:, 0, 1] = -d[:, 2]
    hat_d[:, 0, 2] = d[:, 1]
    hat_d[:, 1, 0] = d[:, 2]
    hat_d[:, 1, 2] = -d[:, 0]
    hat_d[:, 2, 0] = -d[:, 1]
    hat_d[:, 2, 1] = d[:, 0]

    AR = np.einsum("mij,mjk->mik", A, R)  # (M,2,3)
    Jp = AR
    Jc = np.empty((M, 2, 6))
    Jc[:, :, 0:3] = -np.einsum("mij,mjk->mik", AR, hat_d)
    Jc[:, :, 3:6] = -AR
    return r, Jc, Jp, z
