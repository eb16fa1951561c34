import numpy as np
import pytest

from progsfm import kernels, so3
from progsfm.ba import bundle_adjust, reprojection_cost
from progsfm.geometry import project
from progsfm.viewgraph import CameraIntrinsics

from test_geometry import INTR, random_scene


def make_problem(rng, n_cams=4, n_pts=25, noise_px=0.0):
    rotations, centers, points = random_scene(rng, n_cams=n_cams, n_pts=n_pts)
    poses = {v: (rotations[v], centers[v]) for v in range(n_cams)}
    pts = {p: points[p] for p in range(n_pts)}
    intr = {v: INTR for v in range(n_cams)}
    observations = []
    for v in range(n_cams):
        px, z = project(rotations[v], centers[v], INTR, points)
        assert (z > 0).all()
        if noise_px > 0:
            px = px + noise_px * rng.standard_normal(px.shape)
        for p in range(n_pts):
            observations.append((v, p, px[p]))
    return poses, pts, observations, intr


def flat_arrays(poses, pts, observations, intr):
    cam_ids = sorted(poses)
    pt_ids = sorted(pts)
    Rs = np.array([poses[v][0] for v in cam_ids])
    cs = np.array([poses[v][1] for v in cam_ids])
    K = np.array([[intr[v].fx, intr[v].fy, intr[v].cx, intr[v].cy] for v in cam_ids])
    P = np.array([pts[p] for p in pt_ids])
    cam_idx = np.array([v for v, _, _ in observations])
    pt_idx = np.array([p for _, p, _ in observations])
    obs = np.array([o for _, _, o in observations])
    return Rs, cs, K, cam_idx, P, pt_idx, obs


def numeric_jacobians(Rs, cs, K, cam_idx, P, pt_idx, obs, h=1e-6):
    """Central finite differences of the residual vector."""
    def resid(Rs, cs, P):
        r, _ = kernels.reprojection_residuals(Rs, cs, K, cam_idx, P, pt_idx, obs)
        return r

    m = obs.shape[0]
    Jc = np.zeros((m, 2, 6))
    Jp = np.zeros((m, 2, 3))
    for a in range(6):
        Rp, Rm = Rs.copy(), Rs.copy()
        cp, cm = cs.copy(), cs.copy()
        for k in range(Rs.shape[0]):
            d = np.zeros(6)
            d[a] = h
            if a < 3:
                Rp[k] = Rs[k] @ so3.so3_exp(d[:3])
                Rm[k] = Rs[k] @ so3.so3_exp(-d[:3])
            else:
                cp[k] = cs[k] + d[3:]
                cm[k] = cs[k] - d[3:]
        Jc[:, :, a] = (resid(Rp, cp, P) - resid(Rm, cm, P)) / (2 * h)
    for a in range(3):
        Pp, Pm = P.copy(), P.copy()
        Pp[:, a] += h
        Pm[:, a] -= h
        Jp[:, :, a] = (resid(Rs, cs, Pp) - resid(Rs, cs, Pm)) / (2 * h)
    return Jc, Jp


def test_analytic_jacobian_matches_finite_differences():
    # 20 random configurations; 1e-5 relative agreement
    for trial in range(20):
        rng = np.random.default_rng(trial)
        poses, pts, observations, intr = make_problem(rng, n_cams=3, n_pts=8, noise_px=1.0)
        Rs, cs, K, cam_idx, P, pt_idx, obs = flat_arrays(poses, pts, observations, intr)
        r, Jc, Jp, z = kernels.reprojection_jacobians(Rs, cs, K, cam_idx, P, pt_idx, obs)
        Jc_n, Jp_n = numeric_jacobians(Rs, cs, K, cam_idx, P, pt_idx, obs)
        scale = max(np.abs(Jc_n).max(), np.abs(Jp_n).max())
        assert np.abs(Jc - Jc_n).max() / scale < 1e-5
        assert np.abs(Jp - Jp_n).max() / scale < 1e-5


def test_backends_agree():
    from progsfm.kernels import _py

    rng = np.random.default_rng(77)
    poses, pts, observations, intr = make_problem(rng, noise_px=0.5)
    Rs, cs, K, cam_idx, P, pt_idx, obs = flat_arrays(poses, pts, observations, intr)
    r1, Jc1, Jp1, z1 = kernels.reprojection_jacobians(Rs, cs, K, cam_idx, P, pt_idx, obs)
    r2, Jc2, Jp2, z2 = _py.reprojection_jacobians(Rs, cs, K, cam_idx, P, pt_idx, obs)
    assert np.allclose(r1, r2, atol=1e-10)
    assert np.allclose(Jc1, Jc2, atol=1e-10)
    assert np.allclose(Jp1, Jp2, atol=1e-10)
    assert np.allclose(z1, z2, atol=1e-10)


def test_noiseless_input_is_fixed_point():
    rng = np.random.default_rng(1)
    poses, pts, observations, intr = make_problem(rng)
    cost0 = reprojection_cost(poses, pts, observations, intr)
    assert cost0 < 1e-18
    new_poses, new_pts, report = bundle_adjust(poses, pts, observations, intr)
    assert report.final_cost <= cost0 + 1e-18
    for v in poses:
        assert so3.relative_angle_deg(new_poses[v][0], poses[v][0]) < 1e-9


def test_cost_non_increasing_history():
    rng = np.random.default_rng(2)
    poses, pts, observations, intr = make_problem(rng, noise_px=2.0)
    _, _, report = bundle_adjust(poses, pts, observations, intr)
    hist = report.cost_history
    assert all(hist[k + 1] < hist[k] for k in range(len(hist) - 1))
    assert report.final_cost == hist[-1]


def perturb(poses, pts, rng, rot_deg=0.5, center_frac=0.01, keep_fixed=()):
    diam = np.ptp([c for _, c in poses.values()], axis=0).max()
    poses2 = {}
    for v, (R, c) in poses.items():
        if v in keep_fixed:
            poses2[v] = (R, c)
            continue
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        poses2[v] = (
            R @ so3.so3_exp(np.radians(rot_deg) * axis),
            c + center_frac * diam * rng.standard_normal(3),
        )
    pts2 = {p: X + 0.002 * diam * rng.standard_normal(3) for p, X in pts.items()}
    return poses2, pts2


def test_perturbation_recovery_reduces_cost():
    rng = np.random.default_rng(3)
    poses, pts, observations, intr = make_problem(rng, n_cams=5, n_pts=40)
    poses2, pts2 = perturb(poses, pts, rng, keep_fixed={0})
    cost0 = reprojection_cost(poses2, pts2, observations, intr)
    assert cost0 > 1.0
    new_poses, new_pts, report = bundle_adjust(poses2, pts2, observations, intr, fixed_views={0})
    assert report.final_cost < 1e-3 * cost0  # > 99.9% reduction


def test_fixed_views_do_not_move():
    rng = np.random.default_rng(4)
    poses, pts, observations, intr = make_problem(rng)
    poses2, pts2 = perturb(poses, pts, rng, keep_fixed={0, 1})
    new_poses, _, _ = bundle_adjust(poses2, pts2, observations, intr, fixed_views={0, 1})
    for v in (0, 1):
        assert np.array_equal(new_poses[v][0], poses2[v][0])
        assert np.array_equal(new_poses[v][1], poses2[v][1])


def test_empty_observations():
    _, _, report = bundle_adjust({}, {}, [], {})
    assert report.final_cost == 0.0
