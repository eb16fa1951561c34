"""End-to-end acceptance checks.

Each test covers one release criterion and prints a single PASS/FAIL line
(visible with ``pytest -s``) summarizing the measured numbers. The
scenario shared by the order-robustness and adversarial-recovery checks is
a 60-camera ring around a 6-fold symmetric structure with self-consistent
confusion matches between look-alike camera pairs.
"""

import json
import sys
import time

import numpy as np

sys.path.insert(0, "tests")

from progsfm import cli, so3
from progsfm.ba import bundle_adjust, reprojection_cost
from progsfm.clustering import cluster_full
from progsfm.pipeline import PipelineParams, PipelineState
from progsfm.registration import (
    ClusterGraph,
    HUBER_SCALE,
    _residual,
    neighborhood_similarity,
    optimize_cluster_poses,
    robust_cost,
)
from progsfm.rotation_averaging import align_gauge, average_cluster_rotations
from progsfm.sim3 import Sim3, fit_sim3, ransac_sim3
from progsfm.simulator import NoiseModel, evaluate, generate_stream, generate_temple, make_ordering

from test_ba import flat_arrays, make_problem, numeric_jacobians, perturb
from test_clustering import stream_graph
from test_pipeline import SceneSource
from test_registration import grid_centers, pose_error, ring_graph
from test_rotation_averaging import planted_outlier_trial
from test_sim3 import random_sim3 as sim3_sample, ransac_trial, transform_error


def _criterion(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    print(line, flush=True)
    assert ok, line


# -- shared adversarial scenario -----------------------------------------

N_CAMERAS = 60
FOLD = 6
SHUFFLE_SEEDS = (1, 4, 5, 7, 10)


def temple_scene():
    return generate_temple(
        N_CAMERAS, k=FOLD, noise=NoiseModel(), seed=3, window_deg=30.0, n_base_points=60
    )


def temple_stream(scene, ordering):
    return generate_stream(
        scene,
        ordering,
        confusion_rate=0.5,
        noise=NoiseModel(),
        seed=11,
        top_m=20,
        confusion_similarity=0.85,
    )


def run_temple(scene, events):
    def evaluator(components, raw, recoveries):
        return evaluate(components, scene, clusters_raw=raw, recoveries=recoveries)

    state = PipelineState(SceneSource(scene), PipelineParams(eta=0.35), evaluator=evaluator)
    return [state.process_event(e) for e in events]


def test_criterion_1_order_robustness():
    scene = temple_scene()
    results = []
    for seed in SHUFFLE_SEEDS:
        events = temple_stream(scene, make_ordering(N_CAMERAS, "shuffled", seed=seed))
        t0 = time.perf_counter()
        snaps = run_temple(scene, events)
        dt = time.perf_counter() - t0
        m = snaps[-1].metrics
        results.append((seed, m, dt))
    ok = all(
        m.registered_cameras >= 0.95 * N_CAMERAS
        and m.outlier_cameras <= 0.05 * m.registered_cameras
        and m.clusters_effective == 1
        and dt < 120.0
        for _, m, dt in results
    )
    reg = sorted(m.registered_cameras for _, m, _ in results)
    out = max(m.outlier_cameras for _, m, _ in results)
    _criterion(
        "criterion 1 order robustness",
        ok,
        f"{len(results)} shuffled seeds, registered {reg[0]}-{reg[-1]}/60, "
        f"max outliers {out}, max {max(dt for *_, dt in results):.0f}s/seed",
    )


def test_criterion_2_adversarial_recovery():
    scene = temple_scene()
    events = temple_stream(
        scene, make_ordering(N_CAMERAS, "periodic", period=N_CAMERAS // FOLD)
    )
    snaps = run_temple(scene, events)
    rows = []
    for s in snaps:
        frac = s.metrics.outlier_cameras / max(s.metrics.registered_cameras, 1)
        rows.append((s.clusters_raw, frac))
    early_wrong_merge = [k for k, (raw, frac) in enumerate(rows) if raw == 1 and frac > 0.25]
    split_after = early_wrong_merge and any(
        raw >= 2 for raw, _ in rows[early_wrong_merge[0] + 1 :]
    )
    final = snaps[-1].metrics
    ok = (
        bool(early_wrong_merge)
        and bool(split_after)
        and final.outlier_cameras == 0
        and final.recoveries >= 1
    )
    _criterion(
        "criterion 2 adversarial recovery",
        ok,
        f"wrong merge at t={early_wrong_merge[0] if early_wrong_merge else '-'}, "
        f"split={bool(split_after)}, final outliers={final.outlier_cameras}, "
        f"recoveries={final.recoveries}",
    )


def test_criterion_3_rotation_averaging_100_trials():
    missed = 0
    false_frac = []
    mean_errs = []
    for seed in range(100):
        truth, sub, outliers = planted_outlier_trial(seed)
        rot, report = average_cluster_rotations(sub, rho_gmax_deg=10.0)
        missed += len(outliers - report.removed_edges)
        inliers = set(sub.edges) - outliers
        false_frac.append(len(report.removed_edges & inliers) / max(len(inliers), 1))
        aligned = align_gauge(rot.rotations, {i: truth[i] for i in range(len(truth))})
        mean_errs.append(
            np.mean([so3.relative_angle_deg(aligned[i], truth[i]) for i in range(len(truth))])
        )
    ok = missed == 0 and max(false_frac) <= 0.05 and max(mean_errs) < 2.0
    _criterion(
        "criterion 3 rotation averaging",
        ok,
        f"100 trials, missed outliers {missed}, max false removal "
        f"{100 * max(false_frac):.1f}%, worst mean error {max(mean_errs):.2f} deg",
    )


def test_criterion_4_sim3():
    # closed form, noiseless
    rng = np.random.default_rng(0)
    worst_fit = 0.0
    for _ in range(10):
        T = sim3_sample(rng)
        src = rng.standard_normal((30, 3)) * 2.0
        worst_fit = max(worst_fit, transform_error(fit_sim3(src, T.apply(src)), T))
    # RANSAC under 30% planted outliers
    ransac_hits = 0
    for seed in range(50):
        T, src, dst, _ = ransac_trial(seed)
        res = ransac_sim3(src, dst, seed=seed)
        if res is not None and transform_error(res.transform, T) < 1e-6:
            ransac_hits += 1
    # neighborhood similarity on the canonical constructions
    s_disjoint = neighborhood_similarity(
        grid_centers([0, 0, 0]), grid_centers([100, 0, 0]), Sim3.identity()
    ).s
    s_interleaved = neighborhood_similarity(
        grid_centers([0, 0, 0], n=6), grid_centers([0.5, 0, 0], n=6), Sim3.identity()
    ).s
    ok = worst_fit < 1e-9 and ransac_hits == 50 and s_disjoint == 1.0 and s_interleaved < 0.9
    _criterion(
        "criterion 4 sim3 estimation",
        ok,
        f"fit error {worst_fit:.1e}, ransac {ransac_hits}/50, "
        f"s(disjoint)={s_disjoint:.2f}, s(interleaved)={s_interleaved:.2f}",
    )


def test_criterion_5_pose_graph():
    rng = np.random.default_rng(11)
    truth, graph, level = ring_graph(rng, n=6, eps=0.01, outlier_edge=(1, 3))

    b_mean = float(np.mean([np.linalg.norm(e.transform.translation) for e in graph.edges]))

    def total(poses):
        r = np.concatenate(
            [_residual(poses[e.a], poses[e.b], e.transform, 1.0 / b_mean) for e in graph.edges]
        )
        return robust_cost(r, HUBER_SCALE)

    est = optimize_cluster_poses(graph)
    init = optimize_cluster_poses(
        ClusterGraph(nodes=dict(graph.nodes), edges=graph.edges), max_iterations=0
    )
    decreased = total(est) < total(init)
    err = max(pose_error(est, truth).values())
    ok = decreased and err < 3 * level
    _criterion(
        "criterion 5 pose graph",
        ok,
        f"cost {total(init):.3f} -> {total(est):.3f}, max node error "
        f"{err:.4f} vs 3x noise {3 * level:.4f}, one gross outlier constraint",
    )


def test_criterion_6_bundle_adjustment():
    worst_rel = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        poses, pts, observations, intr = make_problem(rng, n_cams=3, n_pts=12)
        arrays = flat_arrays(poses, pts, observations, intr)
        from progsfm import kernels

        _, Jc, Jp, _ = kernels.reprojection_jacobians(*arrays)
        Jc_num, Jp_num = numeric_jacobians(*arrays)
        scale = max(np.abs(Jc_num).max(), np.abs(Jp_num).max())
        worst_rel = max(
            worst_rel,
            np.abs(Jc - Jc_num).max() / scale,
            np.abs(Jp - Jp_num).max() / scale,
        )
    jac_ok = worst_rel < 1e-5

    rng = np.random.default_rng(2)
    poses, pts, observations, intr = make_problem(rng, noise_px=2.0)
    _, _, report = bundle_adjust(poses, pts, observations, intr)
    hist = report.cost_history
    monotone = all(hist[k + 1] < hist[k] for k in range(len(hist) - 1))

    rng = np.random.default_rng(3)
    poses, pts, observations, intr = make_problem(rng, n_cams=5, n_pts=40)
    poses2, pts2 = perturb(poses, pts, rng, keep_fixed={0})
    cost0 = reprojection_cost(poses2, pts2, observations, intr)
    _, _, report = bundle_adjust(poses2, pts2, observations, intr, fixed_views={0})
    recovery = report.final_cost < 1e-3 * cost0

    ok = jac_ok and monotone and recovery
    _criterion(
        "criterion 6 bundle adjustment",
        ok,
        f"jacobian rel err {worst_rel:.1e} over 20 configs, cost monotone={monotone}, "
        f"recovery reduction {100 * (1 - report.final_cost / cost0):.4f}%",
    )


def test_criterion_7_clustering_equivalence():
    rng = np.random.default_rng(123)
    mismatches = 0
    for _ in range(100):
        g, part, _ = stream_graph(rng, n=30)
        if part.membership() != cluster_full(g, 0.4).membership():
            mismatches += 1
    _criterion(
        "criterion 7 clustering equivalence",
        mismatches == 0,
        f"100 random insertion sequences, {mismatches} partition mismatches",
    )


def test_criterion_8_determinism(tmp_path):
    cfg = {
        "scene": {"n_cameras": N_CAMERAS, "k": FOLD, "n_base_points": 60, "window_deg": 30.0},
        "ordering": {
            "kind": "periodic",
            "period": N_CAMERAS // FOLD,
            "confusion_rate": 0.5,
            "top_m": 20,
            "confusion_similarity": 0.85,
        },
        "pipeline": {"eta": 0.35},
        "seeds": {"scene": 3, "stream": 11},
        "output": {"snapshot_every": 10},
    }
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(cfg))
    for out in ("a", "b"):
        rc = cli.main(["run", "--scenario", str(scenario), "--out", str(tmp_path / out)])
        assert rc == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    _criterion(
        "criterion 8 determinism",
        a == b,
        f"two identical runs, metrics.csv bit-identical ({len(a)} bytes)",
    )
