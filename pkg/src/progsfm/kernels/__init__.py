"""Reprojection kernels with a compiled core and a pure-python twin.

Both backends expose:

    reprojection_residuals(Rs, cs, intr, cam_idx, pts, pt_idx, obs)
        -> residuals (M, 2), depths (M,)
    reprojection_jacobians(Rs, cs, intr, cam_idx, pts, pt_idx, obs)
        -> residuals (M, 2), camera blocks (M, 2, 6), point blocks (M, 2, 3),
           depths (M,)

Rs are world-to-camera rotations (C, 3, 3), cs camera centers (C, 3), intr
per-camera (fx, fy, cx, cy). Camera parameter ordering is (rotation update
omega, center). The compiled extension is preferred; set PROGSFM_PURE_PYTHON=1
to force the numpy fallback.
"""

import os

import numpy as np

from . import _py

if os.environ.get("PROGSFM_PURE_PYTHON"):
    _impl = _py
    BACKEND = "python"
else:
    try:
        from . import _ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _py
        BACKEND = "python"


def _prep(Rs, cs, intr, cam_idx, pts, pt_idx, obs):
    return (
        np.ascontiguousarray(Rs, dtype=np.float64),
        np.ascontiguousarray(cs, dtype=np.float64),
        np.ascontiguousarray(intr, dtype=np.float64),
        np.ascontiguousarray(cam_idx, dtype=np.int64),
        np.ascontiguousarray(pts, dtype=np.float64),
        np.ascontiguousarray(pt_idx, dtype=np.int64),
        np.ascontiguousarray(obs, dtype=np.float64),
    )


def reprojection_residuals(Rs, cs, intr, cam_idx, pts, pt_idx, obs):
    return _impl.reprojection_residuals(*_prep(Rs, cs, intr, cam_idx, pts, pt_idx, obs))


def reprojection_jacobians(Rs, cs, intr, cam_idx, pts, pt_idx, obs):
    return _impl.reprojection_jacobians(*_prep(Rs, cs, intr, cam_idx, pts, pt_idx, obs))
