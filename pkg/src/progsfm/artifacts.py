"""Serialization of scenes, streams, snapshots and reconstruction output.

Snapshot JSON schema (all fields always present, units noted):

    {
      "timestep": int,                 # 0-based event index
      "view": int,                     # caller's id of the ingested view
      "clusters_raw": int,             # clusters holding a reconstruction
      "clusters_effective": int,       # components of the cluster graph
      "cluster_summaries": [
        {"cluster": int, "n_views": int, "n_registered": int,
         "n_points": int, "rmse_px": float, "rho_l_deg": float,
         "reset": bool}
      ],
      "cluster_edges": [[a, b, weight], ...],
      "metrics": {"clusters_raw": int, "clusters_effective": int,
                  "registered_cameras": int, "outlier_cameras": int,
                  "unaligned_cameras": int, "recoveries": int,
                  "rmse_to_truth": float},   # scene units
      "recoveries_this_step": int,
      "recoveries_total": int
    }

Parsing and re-serializing a snapshot is a fixpoint. PLY export is binary
little-endian; camera centers are colored red, structure points gray.
"""

import csv
import json
import struct
from typing import Dict, IO, List, Sequence, Union

import numpy as np

from .pipeline import ClusterSummary, Snapshot
from .simulator import EdgeObservation, MatchEvent, Metrics, Scene
from .viewgraph import CameraIntrinsics, RelativeGeometry

METRICS_HEADER = ["t", "clusters_raw", "clusters_effective", "registered", "outliers", "recoveries"]


# -- snapshots -----------------------------------------------------------


def snapshot_to_dict(snapshot: Snapshot) -> dict:
    m = snapshot.metrics
    return {
        "timestep": snapshot.timestep,
        "view": snapshot.view,
        "clusters_raw": snapshot.clusters_raw,
        "clusters_effective": snapshot.clusters_effective,
        "cluster_summaries": [
            {
                "cluster": s.cluster,
                "n_views": s.n_views,
                "n_registered": s.n_registered,
                "n_points": s.n_points,
                "rmse_px": float(s.rmse_px),
                "rho_l_deg": float(s.rho_l_deg),
                "reset": bool(s.reset),
            }
            for s in snapshot.cluster_summaries
        ],
        "cluster_edges": [[int(a), int(b), int(w)] for a, b, w in snapshot.cluster_edges],
        "metrics": {
            "clusters_raw": m.clusters_raw,
            "clusters_effective": m.clusters_effective,
            "registered_cameras": m.registered_cameras,
            "outlier_cameras": m.outlier_cameras,
            "unaligned_cameras": m.unaligned_cameras,
            "recoveries": m.recoveries,
            "rmse_to_truth": float(m.rmse_to_truth),
        },
        "recoveries_this_step": snapshot.recoveries_this_step,
        "recoveries_total": snapshot.recoveries_total,
    }


def snapshot_from_dict(d: dict) -> Snapshot:
    return Snapshot(
        timestep=int(d["timestep"]),
        view=int(d["view"]),
        clusters_raw=int(d["clusters_raw"]),
        clusters_effective=int(d["clusters_effective"]),
        cluster_summaries=[
            ClusterSummary(
                cluster=int(s["cluster"]),
                n_views=int(s["n_views"]),
                n_registered=int(s["n_registered"]),
                n_points=int(s["n_points"]),
                rmse_px=float(s["rmse_px"]),
                rho_l_deg=float(s["rho_l_deg"]),
                reset=bool(s["reset"]),
            )
            for s in d["cluster_summaries"]
        ],
        cluster_edges=[(int(a), int(b), int(w)) for a, b, w in d["cluster_edges"]],
        metrics=Metrics(**d["metrics"]),
        recoveries_this_step=int(d["recoveries_this_step"]),
        recoveries_total=int(d["recoveries_total"]),
    )


def metrics_row(snapshot: Snapshot) -> List[int]:
    m = snapshot.metrics
    return [
        snapshot.timestep,
        snapshot.clusters_raw,
        snapshot.clusters_effective,
        m.registered_cameras,
        m.outlier_cameras,
        snapshot.recoveries_total,
    ]


def write_metrics_csv(path: str, snapshots: Sequence[Snapshot]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for s in snapshots:
            w.writerow(metrics_row(s))


# -- scenes and streams --------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    intr = scene.intrinsics
    return {
        "k": scene.k,
        "intrinsics": [intr.fx, intr.fy, intr.cx, intr.cy],
        "rotations": [R.tolist() for R in scene.rotations],
        "centers": [c.tolist() for c in scene.centers],
        "points": scene.points.tolist(),
        "sym_base": scene.sym_base.tolist(),
        "sym_fold": scene.sym_fold.tolist(),
        "visible": [ids.tolist() for ids in scene.visible],
        "keypoints_px": [kp.tolist() for kp in scene.keypoints_px],
    }


def scene_from_dict(d: dict) -> Scene:
    scene = Scene()
    scene.k = int(d["k"])
    scene.intrinsics = CameraIntrinsics(*[float(x) for x in d["intrinsics"]])
    scene.rotations = [np.asarray(R, dtype=float) for R in d["rotations"]]
    scene.centers = [np.asarray(c, dtype=float) for c in d["centers"]]
    scene.points = np.asarray(d["points"], dtype=float).reshape(-1, 3)
    scene.sym_base = np.asarray(d["sym_base"], dtype=int)
    scene.sym_fold = np.asarray(d["sym_fold"], dtype=int)
    for ids, kp in zip(d["visible"], d["keypoints_px"]):
        ids = np.asarray(ids, dtype=int)
        scene.visible.append(ids)
        scene.kp_index.append({int(p): i for i, p in enumerate(ids)})
        scene.keypoints_px.append(np.asarray(kp, dtype=float).reshape(-1, 2))
    return scene


def stream_to_dict(events: Sequence[MatchEvent]) -> dict:
    out = []
    for ev in events:
        out.append(
            {
                "view": ev.view,
                "edges": [
                    {
                        "other": e.other,
                        "rotation": e.geom.rotation.tolist(),
                        "direction": e.geom.direction.tolist(),
                        "inliers": e.geom.inliers,
                        "correspondences": np.asarray(e.correspondences).tolist(),
                        "label": e.label,
                    }
                    for e in ev.edges
                ],
            }
        )
    return {"events": out}


def stream_from_dict(d: dict) -> List[MatchEvent]:
    events = []
    for ev in d["events"]:
        edges = [
            EdgeObservation(
                other=int(e["other"]),
                geom=RelativeGeometry(
                    np.asarray(e["rotation"], dtype=float),
                    np.asarray(e["direction"], dtype=float),
                    int(e["inliers"]),
                ),
                correspondences=np.asarray(e["correspondences"], dtype=int).reshape(-1, 2),
                label=e["label"],
            )
            for e in ev["edges"]
        ]
        events.append(MatchEvent(view=int(ev["view"]), edges=edges))
    return events


def dump_json(obj: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- PLY export ----------------------------------------------------------


def write_ply(
    target: Union[str, IO[bytes]],
    points: np.ndarray,
    camera_centers: np.ndarray,
) -> None:
    """Binary little-endian PLY with structure points (gray) and camera
    centers (red). Both arrays may be empty; the header stays valid."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    camera_centers = np.asarray(camera_centers, dtype=float).reshape(-1, 3)
    n = len(points) + len(camera_centers)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )

    def _emit(fh: IO[bytes]) -> None:
        fh.write(header.encode("ascii"))
        for arr, color in ((points, (200, 200, 200)), (camera_centers, (255, 0, 0))):
            for x, y, z in arr:
                fh.write(struct.pack("<fffBBB", x, y, z, *color))

    if hasattr(target, "write"):
        _emit(target)
    else:
        with open(target, "wb") as fh:
            _emit(fh)


def read_ply_counts(path: str) -> int:
    """Vertex count declared in a PLY header (sanity checks in tests)."""
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            if line.startswith("element vertex"):
                return int(line.split()[-1])
            if line == "end_header":
                break
    raise ValueError(f"no vertex element in {path}")
