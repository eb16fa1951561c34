"""Rotation group helpers: axis-angle exponential/logarithm and small utilities.

Rotations are 3x3 orthonormal matrices with determinant +1; axis-angle
vectors are canonicalized to norm <= pi.
"""

import numpy as np

ORTHONORMALITY_TOL = 1e-6


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    wx, wy, wz = omega
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula. Exact identity at omega = 0."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        # second-order series, accurate and smooth through zero
        K = hat(omega)
        return np.eye(3) + K + 0.5 * (K @ K)
    K = hat(omega / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def check_rotation(R: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> None:
    """Raise ValueError if R is not a proper rotation within tol."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {R.shape}")
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (max deviation {err:.3e})")
    if np.linalg.det(R) < 0:
        raise ValueError("matrix has negative determinant (reflection)")


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm of a rotation matrix, norm in [0, pi].

    Goes through the unit quaternion, whose largest-diagonal extraction is
    stable both near the identity and near half-turns; a first-order branch
    covers vanishing angles.
    """
    R = np.asarray(R, dtype=float)
    check_rotation(R)
    q = quat_from_rotation(R)  # w >= 0, so the angle lands in [0, pi]
    v = q[1:]
    nv = np.linalg.norm(v)
    if nv < 1e-9:
        # theta = 2*asin(nv) ~ 2*nv; omega ~ 2*v
        return 2.0 * v
    theta = 2.0 * np.arctan2(nv, q[0])
    return (theta / nv) * v


def rotation_angle(R: np.ndarray) -> float:
    """Angle of rotation in radians, in [0, pi].

    Quaternion-based; unlike the arccos-of-trace form it keeps full
    precision near 0 and pi.
    """
    q = quat_from_rotation(np.asarray(R, dtype=float))
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), q[0]))


def rotation_angle_deg(R: np.ndarray) -> float:
    return float(np.degrees(rotation_angle(R)))


def relative_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle between two rotations in degrees."""
    return rotation_angle_deg(Ra @ Rb.T)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random rotation (QR of a Gaussian matrix, sign-fixed)."""
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q


def quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (normalized internally)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
