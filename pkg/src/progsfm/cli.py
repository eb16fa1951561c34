"""Command-line entry point.

Subcommands:
    run     generate a scene + stream from a scenario config and fold the
            pipeline over it, writing snapshots, metrics and final models
    replay  same fold over an already-serialized scene/stream pair
    gen     generate and serialize the scene/stream only
    eval    score a finished run's final model against its scene

Exit codes: 0 success, 1 pipeline failure, 2 usage error (bad arguments,
unreadable config, unwritable output).
"""

import argparse
import os
import sys
from typing import List, Optional

import numpy as np

from . import artifacts
from .pipeline import PipelineParams, PipelineState
from .reconstruction import TRIANGULATED, ReconstructionParams
from .simulator import (
    Metrics,
    NoiseModel,
    Scene,
    evaluate,
    generate_stream,
    generate_temple,
    make_ordering,
)

DEFAULT_SCENARIO = {
    "scene": {
        "n_cameras": 60,
        "k": 6,
        "radius": 10.0,
        "n_base_points": 40,
        "breaking_fraction": 0.15,
        "window_deg": 75.0,
        "camera_height": 2.0,
    },
    "noise": {"rot_deg": 0.3, "dir_deg": 0.5, "px": 1.0},
    "ordering": {
        "kind": "linear",
        "period": 10,
        "confusion_rate": 0.0,
        "top_m": 20,
        "confusion_similarity": 0.75,
    },
    "pipeline": {
        "eta": 0.2,
        "eta_grow": 0.15,
        "mu_min": 5,
        "mu_max": 50,
        "rho_lmax": 10.0,
        "rho_gmax": 10.0,
        "lambda_c": 0.9,
        "min_correspondences": 16,
    },
    "seeds": {"scene": 0, "stream": 0, "order": 0, "pipeline": 0},
    "output": {"snapshot_every": 1},
}


class UsageError(Exception):
    pass


def load_scenario(path: Optional[str]) -> dict:
    cfg = {k: dict(v) for k, v in DEFAULT_SCENARIO.items()}
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise UsageError(f"scenario config not found: {path}")
    try:
        user = artifacts.load_json(path)
    except ValueError as exc:
        raise UsageError(f"scenario config {path} is not valid JSON: {exc}")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"unknown scenario section {section!r} in {path}")
        for key, val in values.items():
            if key not in cfg[section]:
                raise UsageError(f"unknown key {section}.{key} in {path}")
            cfg[section][key] = val
    return cfg


def apply_overrides(cfg: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["seeds"]["order"] = args.seed
    if getattr(args, "ordering", None) is not None:
        cfg["ordering"]["kind"] = args.ordering
    if getattr(args, "period", None) is not None:
        cfg["ordering"]["period"] = args.period
    if getattr(args, "snapshot_every", None) is not None:
        cfg["output"]["snapshot_every"] = args.snapshot_every


def build_scene(cfg: dict) -> Scene:
    sc, nz = cfg["scene"], cfg["noise"]
    return generate_temple(
        int(sc["n_cameras"]),
        k=int(sc["k"]),
        radius=float(sc["radius"]),
        noise=NoiseModel(nz["rot_deg"], nz["dir_deg"], nz["px"]),
        seed=int(cfg["seeds"]["scene"]),
        n_base_points=int(sc["n_base_points"]),
        breaking_fraction=float(sc["breaking_fraction"]),
        window_deg=float(sc["window_deg"]),
        camera_height=float(sc["camera_height"]),
    )


def build_stream(cfg: dict, scene: Scene):
    od, nz = cfg["ordering"], cfg["noise"]
    ordering = make_ordering(
        scene.n_cameras, od["kind"], seed=int(cfg["seeds"]["order"]), period=int(od["period"])
    )
    return generate_stream(
        scene,
        ordering,
        confusion_rate=float(od["confusion_rate"]),
        noise=NoiseModel(nz["rot_deg"], nz["dir_deg"], nz["px"]),
        seed=int(cfg["seeds"]["stream"]),
        top_m=int(od["top_m"]),
        confusion_similarity=float(od["confusion_similarity"]),
    )


def build_params(cfg: dict) -> PipelineParams:
    p = cfg["pipeline"]
    return PipelineParams(
        eta=float(p["eta"]),
        min_correspondences=int(p["min_correspondences"]),
        rho_gmax_deg=float(p["rho_gmax"]),
        lambda_c=float(p["lambda_c"]),
        recon=ReconstructionParams(
            mu_min=int(p["mu_min"]),
            mu_max=int(p["mu_max"]),
            eta_grow=float(p["eta_grow"]),
            rho_lmax_deg=float(p["rho_lmax"]),
        ),
        seed=int(cfg["seeds"]["pipeline"]),
    )


class _SceneSource:
    def __init__(self, scene: Scene):
        self._scene = scene

    def keypoints(self, view: int) -> np.ndarray:
        return self._scene.keypoints(view)

    def intrinsics(self, view: int):
        return self._scene.intrinsics


def run_pipeline(scene: Scene, events, params: PipelineParams, out: str,
                 max_events: Optional[int] = None, snapshot_every: int = 1) -> Metrics:
    """Fold the pipeline over the stream, writing snapshots, metrics.csv
    and the final per-component models under `out`. Returns the final
    ground-truth metrics."""
    snap_dir = os.path.join(out, "snapshots")
    final_dir = os.path.join(out, "final")
    os.makedirs(snap_dir, exist_ok=True)
    os.makedirs(final_dir, exist_ok=True)

    def evaluator(components, raw, recoveries):
        return evaluate(components, scene, clusters_raw=raw, recoveries=recoveries)

    state = PipelineState(_SceneSource(scene), params, evaluator=evaluator)
    snapshots = []
    for ev in events[: max_events if max_events is not None else len(events)]:
        snap = state.process_event(ev)
        snapshots.append(snap)
        if snap.timestep % max(snapshot_every, 1) == 0:
            artifacts.dump_json(
                artifacts.snapshot_to_dict(snap),
                os.path.join(snap_dir, f"{snap.timestep:04d}.json"),
            )
    artifacts.write_metrics_csv(os.path.join(out, "metrics.csv"), snapshots)

    components_payload = []
    for comp in state.cluster_graph.components():
        pts: List[np.ndarray] = []
        centers: List[np.ndarray] = []
        views = {}
        for cid in comp:
            recon = state.reconstructions.get(cid)
            if recon is None:
                continue
            T = state.cluster_poses.get(cid)
            P = np.array([t.point for t in recon.tracks if t.point is not None and t.state == TRIANGULATED])
            C = np.array([recon.poses[v].center for v in sorted(recon.registered)])
            if T is not None:
                P = T.apply(P) if len(P) else P.reshape(0, 3)
                C = T.apply(C) if len(C) else C.reshape(0, 3)
            if len(P):
                pts.append(P)
            if len(C):
                centers.append(C)
            for v in sorted(recon.registered):
                c = recon.poses[v].center
                views[state.matches.external_id(v)] = (T.apply(c[None])[0] if T is not None else c).tolist()
        if not views:
            continue
        name = f"cluster_{min(comp):03d}.ply"
        artifacts.write_ply(
            os.path.join(final_dir, name),
            np.concatenate(pts) if pts else np.zeros((0, 3)),
            np.concatenate(centers) if centers else np.zeros((0, 3)),
        )
        components_payload.append({"clusters": comp, "ply": name, "cameras": views})
    artifacts.dump_json({"components": components_payload}, os.path.join(final_dir, "components.json"))
    return snapshots[-1].metrics if snapshots else Metrics()


def cmd_gen(args) -> int:
    cfg = load_scenario(args.scenario)
    apply_overrides(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    scene = build_scene(cfg)
    events = build_stream(cfg, scene)
    artifacts.dump_json(cfg, os.path.join(args.out, "scenario.json"))
    artifacts.dump_json(artifacts.scene_to_dict(scene), os.path.join(args.out, "scene.json"))
    artifacts.dump_json(artifacts.stream_to_dict(events), os.path.join(args.out, "stream.json"))
    print(f"wrote scene ({scene.n_cameras} cameras) and stream ({len(events)} events) to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    apply_overrides(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    scene = build_scene(cfg)
    events = build_stream(cfg, scene)
    artifacts.dump_json(cfg, os.path.join(args.out, "scenario.json"))
    artifacts.dump_json(artifacts.scene_to_dict(scene), os.path.join(args.out, "scene.json"))
    metrics = run_pipeline(
        scene,
        events,
        build_params(cfg),
        args.out,
        max_events=args.max_events,
        snapshot_every=int(cfg["output"]["snapshot_every"]),
    )
    print(
        f"final: clusters_raw={metrics.clusters_raw} "
        f"clusters_effective={metrics.clusters_effective} "
        f"registered={metrics.registered_cameras} outliers={metrics.outlier_cameras} "
        f"recoveries={metrics.recoveries}"
    )
    return 0


def cmd_replay(args) -> int:
    for path in (args.scene, args.stream):
        if not os.path.isfile(path):
            raise UsageError(f"input file not found: {path}")
    cfg = load_scenario(args.scenario)
    apply_overrides(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    scene = artifacts.scene_from_dict(artifacts.load_json(args.scene))
    events = artifacts.stream_from_dict(artifacts.load_json(args.stream))
    metrics = run_pipeline(
        scene,
        events,
        build_params(cfg),
        args.out,
        max_events=args.max_events,
        snapshot_every=int(cfg["output"]["snapshot_every"]),
    )
    print(
        f"final: registered={metrics.registered_cameras} "
        f"outliers={metrics.outlier_cameras} "
        f"clusters_effective={metrics.clusters_effective}"
    )
    return 0


def cmd_eval(args) -> int:
    for path in (args.scene, os.path.join(args.run, "final", "components.json")):
        if not os.path.isfile(path):
            raise UsageError(f"input file not found: {path}")
    scene = artifacts.scene_from_dict(artifacts.load_json(args.scene))
    payload = artifacts.load_json(os.path.join(args.run, "final", "components.json"))
    components = [
        {int(v): np.asarray(c, dtype=float) for v, c in comp["cameras"].items()}
        for comp in payload["components"]
    ]
    m = evaluate(components, scene)
    print(
        f"registered={m.registered_cameras} outliers={m.outlier_cameras} "
        f"unaligned={m.unaligned_cameras} rmse_to_truth={m.rmse_to_truth:.4f} "
        f"components={m.clusters_effective}"
    )
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="progsfm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--scenario", help="scenario config JSON")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the ordering seed")
        p.add_argument(
            "--ordering", choices=["linear", "shuffled", "periodic"], help="override view order"
        )
        p.add_argument("--period", type=int, help="period of the periodic ordering")
        p.add_argument("--max-events", type=int, help="stop after this many events")
        p.add_argument("--snapshot-every", type=int, help="write every Nth snapshot")

    p_run = sub.add_parser("run", help="generate a scenario and run the pipeline")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="run the pipeline on a serialized scene/stream")
    common(p_replay)
    p_replay.add_argument("--scene", required=True, help="scene JSON")
    p_replay.add_argument("--stream", required=True, help="stream JSON")
    p_replay.set_defaults(func=cmd_replay)

    p_gen = sub.add_parser("gen", help="generate and serialize scene and stream")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_eval = sub.add_parser("eval", help="score a finished run against its scene")
    p_eval.add_argument("--scene", required=True, help="scene JSON")
    p_eval.add_argument("--run", required=True, help="run output directory")
    p_eval.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failure
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
