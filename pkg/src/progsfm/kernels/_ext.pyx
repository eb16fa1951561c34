# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled reprojection kernels; see kernels.__init__ for the contract."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def reprojection_residuals(double[:, :, ::1] Rs, double[:, ::1] cs,
                           double[:, ::1] intr, long[::1] cam_idx,
                           double[:, ::1] pts, long[::1] pt_idx,
                           double[:, ::1] obs):
    cdef Py_ssize_t M = cam_idx.shape[0]
    r_arr = np.empty((M, 2), dtype=np.float64)
    z_arr = np.empty(M, dtype=np.float64)
    cdef double[:, ::1] r = r_arr
    cdef double[::1] zv = z_arr
    cdef Py_ssize_t m, c, p, i
    cdef double d0, d1, d2, x0, x1, x2
    for m in range(M):
        c = cam_idx[m]
        p = pt_idx[m]
        d0 = pts[p, 0] - cs[c, 0]
        d1 = pts[p, 1] - cs[c, 1]
        d2 = pts[p, 2] - cs[c, 2]
        x0 = Rs[c, 0, 0] * d0 + Rs[c, 0, 1] * d1 + Rs[c, 0, 2] * d2
        x1 = Rs[c, 1, 0] * d0 + Rs[c, 1, 1] * d1 + Rs[c, 1, 2] * d2
        x2 = Rs[c, 2, 0] * d0 + Rs[c, 2, 1] * d1 + Rs[c, 2, 2] * d2
        r[m, 0] = intr[c, 0] * x0 / x2 + intr[c, 2] - obs[m, 0]
        r[m, 1] = intr[c, 1] * x1 / x2 + intr[c, 3] - obs[m, 1]
        zv[m] = x2
    return r_arr, z_arr


def reprojection_jacobians(double[:, :, ::1] Rs, double[:, ::1] cs,
                           double[:, ::1] intr, long[::1] cam_idx,
                           double[:, ::1] pts, long[::1] pt_idx,
                           double[:, ::1] obs):
    cdef Py_ssize_t M = cam_idx.shape[0]
    r_arr = np.empty((M, 2), dtype=np.float64)
    Jc_arr = np.empty((M, 2, 6), dtype=np.float64)
    Jp_arr = np.empty((M, 2, 3), dtype=np.float64)
    z_arr = np.empty(M, dtype=np.float64)
    cdef double[:, ::1] r = r_arr
    cdef double[:, :, ::1] Jc = Jc_arr
    cdef double[:, :, ::1] Jp = Jp_arr
    cdef double[::1] zv = z_arr
    cdef Py_ssize_t m, c, p, i, k
    cdef double d[3]
    cdef double x0, x1, x2, fx, fy
    cdef double A[2][3]
    cdef double AR[2][3]
    cdef double hd[3][3]
    for m in range(M):
        c = cam_idx[m]
        p = pt_idx[m]
        for i in range(3):
            d[i] = pts[p, i] - cs[c, i]
        x0 = Rs[c, 0, 0] * d[0] + Rs[c, 0, 1] * d[1] + Rs[c, 0, 2] * d[2]
        x1 = Rs[c, 1, 0] * d[0] + Rs[c, 1, 1] * d[1] + Rs[c, 1, 2] * d[2]
        x2 = Rs[c, 2, 0] * d[0] + Rs[c, 2, 1] * d[1] + Rs[c, 2, 2] * d[2]
        fx = intr[c, 0]
        fy = intr[c, 1]
        r[m, 0] = fx * x0 / x2 + intr[c, 2] - obs[m, 0]
        r[m, 1] = fy * x1 / x2 + intr[c, 3] - obs[m, 1]
        zv[m] = x2

        A[0][0] = fx / x2
        A[0][1] = 0.0
        A[0][2] = -fx * x0 / (x2 * x2)
        A[1][0] = 0.0
        A[1][1] = fy / x2
        A[1][2] = -fy * x1 / (x2 * x2)

        for i in range(2):
            for k in range(3):
                AR[i][k] = (A[i][0] * Rs[c, 0, k] + A[i][1] * Rs[c, 1, k]
                            + A[i][2] * Rs[c, 2, k])
                Jp[m, i, k] = AR[i][k]
                Jc[m, i, 3 + k] = -AR[i][k]

        hd[0][0] = 0.0;    hd[0][1] = -d[2]; hd[0][2] = d[1]
        hd[1][0] = d[2];   hd[1][1] = 0.0;   hd[1][2] = -d[0]
        hd[2][0] = -d[1];  hd[2][1] = d[0];  hd[2][2] = 0.0

        for i in range(2):
            for k in range(3):
                Jc[m, i, k] = -(AR[i][0] * hd[0][k] + AR[i][1] * hd[1][k]
                                + AR[i][2] * hd[2][k])
    return r_arr, Jc_arr, Jp_arr, z_arr
