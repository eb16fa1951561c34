import numpy as np
import pytest

from progsfm import so3
from progsfm.geometry import (
    pixel_to_ray,
    project,
    register_p3p_ransac,
    solve_centers_from_directions,
    triangulate_point,
    triangulation_angle_deg,
)
from progsfm.viewgraph import CameraIntrinsics

INTR = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)


def look_at(center, target=np.zeros(3), up=np.array([0.0, 0.0, 1.0])):
    """World-to-camera rotation with +z toward the target."""
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def random_scene(rng, n_cams=5, n_pts=30, radius=6.0):
    centers = []
    for k in range(n_cams):
        a = 2 * np.pi * k / n_cams + rng.uniform(-0.1, 0.1)
        centers.append(np.array([radius * np.cos(a), radius * np.sin(a), rng.uniform(-1, 1)]))
    rotations = [look_at(c) for c in centers]
    points = rng.uniform(-1.5, 1.5, size=(n_pts, 3))
    return rotations, centers, points


def test_project_against_manual_formula():
    rng = np.random.default_rng(0)
    R = so3.random_rotation(rng)
    c = rng.standard_normal(3)
    X = c + R.T @ np.array([0.3, -0.2, 4.0])  # known camera coordinates
    px, z = project(R, c, INTR, X)
    assert z[0] == pytest.approx(4.0)
    assert px[0, 0] == pytest.approx(600.0 * 0.3 / 4.0 + 320.0)
    assert px[0, 1] == pytest.approx(600.0 * -0.2 / 4.0 + 240.0)


def test_pixel_to_ray_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(10):
        px = np.array([rng.uniform(0, 640), rng.uniform(0, 480)])
        ray = pixel_to_ray(INTR, px)
        assert np.linalg.norm(ray) == pytest.approx(1.0)
        back, _ = project(np.eye(3), np.zeros(3), INTR, ray * 3.7)
        assert np.allclose(back[0], px, atol=1e-9)


def test_triangulate_two_views_exact():
    rng = np.random.default_rng(2)
    rotations, centers, points = random_scene(rng, n_cams=2, n_pts=20)
    for X in points:
        pxs = [project(R, c, INTR, X)[0][0] for R, c in zip(rotations, centers)]
        Xh = triangulate_point(rotations, centers, [INTR, INTR], pxs)
        assert Xh is not None
        assert np.linalg.norm(Xh - X) < 1e-8


def test_triangulation_angle_zero_for_parallel_rays():
    c0 = np.zeros(3)
    c1 = np.array([0.0, 0.0, -1.0])  # both cameras behind the point on one line
    X = np.array([0.0, 0.0, 5.0])
    assert triangulation_angle_deg([np.eye(3)] * 2, [c0, c1], X) < 1e-9
    # a proper baseline gives the expected angle
    c2 = np.array([5.0, 0.0, 0.0])
    ang = triangulation_angle_deg([np.eye(3)] * 2, [c0, c2], X)
    assert ang == pytest.approx(45.0, abs=1e-9)


def test_triangulate_multi_view_noise_rmse():
    rng = np.random.default_rng(3)
    rotations, centers, points = random_scene(rng, n_cams=3, n_pts=40)
    errs = []
    for X in points:
        pxs = [
            project(R, c, INTR, X)[0][0] + rng.standard_normal(2) for R, c in zip(rotations, centers)
        ]
        Xh = triangulate_point(rotations, centers, [INTR] * 3, pxs)
        for R, c, px in zip(rotations, centers, pxs):
            errs.append(np.linalg.norm(project(R, c, INTR, Xh)[0][0] - px))
    assert np.sqrt(np.mean(np.square(errs))) < 2.0


def test_p3p_noiseless_exact_pose():
    rng = np.random.default_rng(4)
    rotations, centers, points = random_scene(rng, n_cams=1, n_pts=20)
    R, c = rotations[0], centers[0]
    px, _ = project(R, c, INTR, points)
    res = register_p3p_ransac(points, px, INTR, seed=0)
    assert res is not None
    assert res.inlier_mask.all()
    assert so3.relative_angle_deg(res.rotation, R) < 1e-6
    assert np.linalg.norm(res.center - c) < 1e-6


def test_p3p_30pct_outliers_50_trials():
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        rotations, centers, points = random_scene(rng, n_cams=1, n_pts=40)
        R, c = rotations[0], centers[0]
        px, _ = project(R, c, INTR, points)
        n_out = 12
        idx = rng.choice(40, size=n_out, replace=False)
        px[idx] += rng.uniform(30, 200, size=(n_out, 2)) * rng.choice([-1, 1], size=(n_out, 2))
        res = register_p3p_ransac(points, px, INTR, seed=seed)
        assert res is not None
        assert so3.relative_angle_deg(res.rotation, R) < 0.1
        assert np.linalg.norm(res.center - c) < 0.01
        clean = np.ones(40, dtype=bool)
        clean[idx] = False
        assert res.inlier_mask[clean].all()
        assert not res.inlier_mask[~clean].any()


def test_p3p_deterministic():
    rng = np.random.default_rng(9)
    rotations, centers, points = random_scene(rng, n_cams=1, n_pts=25)
    px, _ = project(rotations[0], centers[0], INTR, points)
    px[:5] += 80.0
    a = register_p3p_ransac(points, px, INTR, seed=3)
    b = register_p3p_ransac(points, px, INTR, seed=3)
    assert np.array_equal(a.inlier_mask, b.inlier_mask)
    assert np.array_equal(a.rotation, b.rotation)
    assert a.iterations == b.iterations


def test_p3p_too_few_points():
    assert register_p3p_ransac(np.zeros((3, 3)), np.zeros((3, 2)), INTR) is None


def ring_directions(rotations, centers, pairs):
    """Ground-truth unit baseline directions in the later frame."""
    directions = {}
    for (i, j) in pairs:
        d = rotations[j] @ (centers[i] - centers[j])
        directions[(i, j)] = d / np.linalg.norm(d)
    return directions


def test_centers_from_directions_recovers_ring():
    rng = np.random.default_rng(5)
    rotations, centers, _ = random_scene(rng, n_cams=8)
    pairs = [(i, (i + 1) % 8) for i in range(8)] + [(i, (i + 2) % 8) for i in range(8)]
    pairs = sorted({tuple(sorted(p)) for p in pairs})
    directions = ring_directions(rotations, centers, pairs)
    rot_map = {i: rotations[i] for i in range(8)}
    est = solve_centers_from_directions(rot_map, directions)
    # compare up to the similarity gauge: align estimated to true centers
    from progsfm.sim3 import fit_sim3

    T = fit_sim3(np.array([est[i] for i in range(8)]), np.array(centers))
    for i in range(8):
        assert np.linalg.norm(T.apply(est[i]) - centers[i]) < 1e-6


def test_centers_from_directions_collinear_raises():
    # cameras on a line, all baselines along the same axis
    rotations = {i: np.eye(3) for i in range(4)}
    centers = {i: np.array([float(i), 0.0, 0.0]) for i in range(4)}
    pairs = [(0, 1), (1, 2), (2, 3), (0, 2)]
    directions = {
        (i, j): (centers[i] - centers[j]) / np.linalg.norm(centers[i] - centers[j])
        for (i, j) in pairs
    }
    with pytest.raises(ValueError, match="rank"):
        solve_centers_from_directions(rotations, directions)


def test_centers_from_directions_disconnected_raises():
    rotations = {i: np.eye(3) for i in range(4)}
    directions = {(0, 1): np.array([1.0, 0, 0]), (2, 3): np.array([0.0, 1.0, 0])}
    with pytest.raises(ValueError, match="disconnected"):
        solve_centers_from_directions(rotations, directions)
