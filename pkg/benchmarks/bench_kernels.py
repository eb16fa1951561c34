"""Timing comparison of the compiled and pure-numpy reprojection kernels.

Usage: python benchmarks/bench_kernels.py [--cameras N] [--points N]
                                          [--obs-per-point N] [--repeats N]
"""

import argparse
import timeit

import numpy as np

from progsfm import so3
from progsfm.kernels import _py

try:
    from progsfm.kernels import _ext
except ImportError:
    _ext = None


def make_problem(rng, n_cams, n_pts, obs_per_point):
    Rs = np.array([so3.random_rotation(rng) for _ in range(n_cams)])
    cs = rng.standard_normal((n_cams, 3)) * 5.0
    intr = np.tile([600.0, 600.0, 320.0, 240.0], (n_cams, 1))
    pts = rng.standard_normal((n_pts, 3)) + np.array([0.0, 0.0, 30.0])
    cam_idx = []
    pt_idx = []
    for p in range(n_pts):
        for v in rng.choice(n_cams, size=min(obs_per_point, n_cams), replace=False):
            cam_idx.append(v)
            pt_idx.append(p)
    cam_idx = np.array(cam_idx, dtype=np.int64)
    pt_idx = np.array(pt_idx, dtype=np.int64)
    obs = rng.uniform([0, 0], [640, 480], size=(len(cam_idx), 2))
    return Rs, cs, intr, cam_idx, pts, pt_idx, obs


def bench(fn, args, repeats):
    times = timeit.repeat(lambda: fn(*args), number=1, repeat=repeats)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cameras", type=int, default=50)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--obs-per-point", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    problem = make_problem(rng, args.cameras, args.points, args.obs_per_point)
    n_obs = len(problem[3])
    print(f"{args.cameras} cameras, {args.points} points, {n_obs} observations")

    for name in ("reprojection_residuals", "reprojection_jacobians"):
        t_py = bench(getattr(_py, name), problem, args.repeats)
        line = f"{name:26s} python {1e3 * t_py:8.2f} ms"
        if _ext is not None:
            r_py = getattr(_py, name)(*problem)
            r_ext = getattr(_ext, name)(*problem)
            for a, b in zip(r_py, r_ext):
                assert np.allclose(a, b, atol=1e-10), "backend outputs disagree"
            t_ext = bench(getattr(_ext, name), problem, args.repeats)
            line += f"   cython {1e3 * t_ext:8.2f} ms   speedup {t_py / t_ext:5.2f}x"
        else:
            line += "   (compiled extension unavailable)"
        print(line)


if __name__ == "__main__":
    main()
