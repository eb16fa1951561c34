"""Synthetic scene and match-stream generation, plus ground-truth metrics.

Scenes are circular camera rigs around a structure with exact k-fold
rotational symmetry about the z axis, spiked with a fraction of
symmetry-breaking points. The stream generator matches each arriving view
against prior views by shared visibility and can emit self-consistent
confusion edges between symmetry-related camera pairs: their geometry is
the true relative geometry composed with the symmetry rotation, and their
correspondences link each point to its rotated twin, so they are
indistinguishable from genuine edges by any pairwise check.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import so3
from .geometry import project
from .sim3 import fit_sim3, ransac_sim3
from .viewgraph import CameraIntrinsics, RelativeGeometry

GENUINE = "genuine"
CONFUSION = "symmetry_confusion"

DEFAULT_INTRINSICS = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)
IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480


@dataclass
class NoiseModel:
    rot_deg: float = 0.3
    dir_deg: float = 0.5
    px: float = 1.0

    @staticmethod
    def zero() -> "NoiseModel":
        return NoiseModel(0.0, 0.0, 0.0)


def _look_at(center, target, up=np.array([0.0, 0.0, 1.0])):
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


class Scene:
    """Ground truth: cameras, structure points, per-camera visibility and
    noisy keypoint measurements."""

    def __init__(self):
        self.k: int = 1
        self.rotations: List[np.ndarray] = []
        self.centers: List[np.ndarray] = []
        self.intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
        self.points: np.ndarray = np.zeros((0, 3))
        # symmetric points carry (base index, fold); breaking points have base -1
        self.sym_base: np.ndarray = np.zeros(0, dtype=int)
        self.sym_fold: np.ndarray = np.zeros(0, dtype=int)
        self._partner: Dict[int, np.ndarray] = {}
        self.visible: List[np.ndarray] = []  # per camera, sorted point ids
        self.kp_index: List[Dict[int, int]] = []  # per camera, point id -> row
        self.keypoints_px: List[np.ndarray] = []  # per camera, (n, 2)

    @property
    def n_cameras(self) -> int:
        return len(self.centers)

    def keypoints(self, view: int) -> np.ndarray:
        return self.keypoints_px[view]

    def symmetry_rotation(self, fold: int = 1) -> np.ndarray:
        ang = 2.0 * np.pi * fold / self.k
        return so3.so3_exp(ang * np.array([0.0, 0.0, 1.0]))

    def partner(self, fold: int) -> np.ndarray:
        """Point-id array mapping p -> id of S^fold applied to p (-1 when
        the twin does not exist, e.g. symmetry-breaking points)."""
        fold = fold % self.k
        if fold not in self._partner:
            n = len(self.points)
            out = np.full(n, -1, dtype=int)
            index = {}
            for p in range(n):
                if self.sym_base[p] >= 0:
                    index[(self.sym_base[p], self.sym_fold[p])] = p
            for p in range(n):
                if self.sym_base[p] >= 0:
                    key = (self.sym_base[p], (self.sym_fold[p] + fold) % self.k)
                    out[p] = index.get(key, -1)
            self._partner[fold] = out
        return self._partner[fold]

    def min_camera_distance(self) -> float:
        C = np.array(self.centers)
        d = np.linalg.norm(C[:, None] - C[None, :], axis=2)
        d[d == 0] = np.inf
        return float(d.min())

    def diameter(self) -> float:
        C = np.array(self.centers)
        return float(np.max(np.linalg.norm(C[:, None] - C[None, :], axis=2)))


def generate_temple(
    n_cameras: int,
    k: int = 6,
    radius: float = 10.0,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    n_base_points: int = 40,
    breaking_fraction: float = 0.15,
    window_deg: float = 75.0,
    camera_height: float = 2.0,
) -> Scene:
    """Circular rig looking inward at a k-fold symmetric point structure.

    A base wedge of points is replicated by the symmetry rotation;
    breaking_fraction controls how many additional asymmetric points spike
    the structure. Visibility combines the camera frustum with an
    azimuthal occlusion window (the structure is treated as opaque: a
    camera only sees the structure facing it).
    """
    if n_cameras < 2 * k:
        raise ValueError(f"need at least {2 * k} cameras for fold {k}")
    if k < 1 or radius <= 0:
        raise ValueError("invalid scene parameters")
    rng = np.random.default_rng(seed)
    scene = Scene()
    scene.k = k

    cam_angles = 2.0 * np.pi * np.arange(n_cameras) / n_cameras
    target = np.array([0.0, 0.0, 1.2])
    for a in cam_angles:
        c = np.array([radius * np.cos(a), radius * np.sin(a), camera_height])
        scene.centers.append(c)
        scene.rotations.append(_look_at(c, target))

    # structure: one wedge replicated k times, plus breaking points
    wedge = 2.0 * np.pi / k
    r = rng.uniform(1.5, 4.5, size=n_base_points)
    phi = rng.uniform(0.0, wedge, size=n_base_points)
    z = rng.uniform(0.0, 2.5, size=n_base_points)
    pts = []
    sym_base = []
    sym_fold = []
    for m in range(k):
        ang = phi + m * wedge
        for b in range(n_base_points):
            pts.append([r[b] * np.cos(ang[b]), r[b] * np.sin(ang[b]), z[b]])
            sym_base.append(b)
            sym_fold.append(m)
    n_break = int(round(breaking_fraction * k * n_base_points))
    rb = rng.uniform(1.5, 4.5, size=n_break)
    phib = rng.uniform(0.0, 2.0 * np.pi, size=n_break)
    zb = rng.uniform(0.0, 2.5, size=n_break)
    for b in range(n_break):
        pts.append([rb[b] * np.cos(phib[b]), rb[b] * np.sin(phib[b]), zb[b]])
        sym_base.append(-1)
        sym_fold.append(0)
    points = np.array(pts)
    sym_base = np.array(sym_base)
    sym_fold = np.array(sym_fold)

    # visibility: frustum test plus azimuthal window
    intr = scene.intrinsics
    window = np.radians(window_deg)
    pt_az = np.arctan2(points[:, 1], points[:, 0])
    vis_sets: List[List[int]] = [[] for _ in range(n_cameras)]
    for v in range(n_cameras):
        px, zdepth = project(scene.rotations[v], scene.centers[v], intr, points)
        az_diff = np.abs((pt_az - cam_angles[v] + np.pi) % (2 * np.pi) - np.pi)
        ok = (
            (zdepth > 0)
            & (px[:, 0] >= 0)
            & (px[:, 0] < IMAGE_WIDTH)
            & (px[:, 1] >= 0)
            & (px[:, 1] < IMAGE_HEIGHT)
            & (az_diff < window)
        )
        vis_sets[v] = list(np.where(ok)[0])

    # enforce the >= 2 observations invariant by dropping starved points
    counts = np.zeros(len(points), dtype=int)
    for v in range(n_cameras):
        counts[vis_sets[v]] += 1
    keep = counts >= 2
    remap = np.full(len(points), -1, dtype=int)
    remap[keep] = np.arange(int(keep.sum()))
    scene.points = points[keep]
    scene.sym_base = sym_base[keep].copy()
    scene.sym_fold = sym_fold[keep].copy()
    # a symmetric point whose twin was dropped keeps its class; partner()
    # reports -1 for the missing twin via its index lookup

    for v in range(n_cameras):
        ids = np.array(sorted(remap[p] for p in vis_sets[v] if keep[p]), dtype=int)
        scene.visible.append(ids)
        scene.kp_index.append({int(p): i for i, p in enumerate(ids)})
        px, _ = project(scene.rotations[v], scene.centers[v], intr, scene.points[ids])
        if noise.px > 0:
            px = px + noise.px * rng.standard_normal(px.shape)
        scene.keypoints_px.append(px)
    return scene


class ExhaustiveProvider:
    """Ground-truth correspondence provider over all genuine shared
    visibility; used by reconstruction-level tests."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def keypoints(self, view: int) -> np.ndarray:
        return self.scene.keypoints(view)

    def correspondences(self, i: int, j: int) -> np.ndarray:
        s = self.scene
        shared = np.intersect1d(s.visible[i], s.visible[j])
        if len(shared) == 0:
            return np.zeros((0, 2), dtype=int)
        return np.array(
            [[s.kp_index[i][int(p)], s.kp_index[j][int(p)]] for p in shared], dtype=int
        )


@dataclass
class EdgeObservation:
    other: int
    geom: RelativeGeometry
    correspondences: np.ndarray  # (m, 2): keypoint in `other`, keypoint in event view
    label: str


@dataclass
class MatchEvent:
    view: int
    edges: List[EdgeObservation] = field(default_factory=list)


def _noisy_geometry(R, direction, inliers, noise, rng) -> RelativeGeometry:
    if noise.rot_deg > 0:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        R = so3.so3_exp(np.radians(noise.rot_deg) * rng.standard_normal() * axis) @ R
    if noise.dir_deg > 0:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        direction = so3.so3_exp(np.radians(noise.dir_deg) * rng.standard_normal() * axis) @ direction
    return RelativeGeometry(R, direction / np.linalg.norm(direction), int(inliers))


def make_ordering(n: int, kind: str, seed: int = 0, period: int = 0) -> List[int]:
    """View arrival order: linear, seeded shuffle, or the adversarial
    periodic interleave (0, period, 1, period+1, ...)."""
    if kind == "linear":
        return list(range(n))
    if kind == "shuffled":
        rng = np.random.default_rng(seed)
        return [int(v) for v in rng.permutation(n)]
    if kind == "periodic":
        if period <= 0 or period >= n:
            raise ValueError(f"periodic ordering needs 0 < period < {n}")
        order = []
        seen = set()
        for i in range(n):
            for v in (i, i + period):
                v %= n
                if v not in seen:
                    seen.add(v)
                    order.append(v)
        return order
    raise ValueError(f"unknown ordering kind: {kind!r}")


def generate_stream(
    scene: Scene,
    ordering: Sequence[int],
    confusion_rate: float = 0.0,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    top_m: int = 20,
    confusion_similarity: float = 0.75,
) -> List[MatchEvent]:
    """Match events for views arriving in the given order.

    Each arriving view is matched against the best prior views by shared
    visibility. For symmetry-related pairs a confusion interpretation is
    scored as (congruent symmetric overlap) x confusion_rate; whichever
    interpretation supports more correspondences is emitted (ties favor
    genuine), so each pair contributes at most one edge. A confusion
    interpretation is only considered when the congruent overlap covers at
    least `confusion_similarity` of the smaller visible set — matchers are
    fooled by near-identical images of twin structure, not by glancing
    symmetric overlap.
    """
    rng = np.random.default_rng(seed)
    events = []
    arrived: List[int] = []
    vis = [set(int(p) for p in ids) for ids in scene.visible]
    for v in ordering:
        event = MatchEvent(view=v)
        scored = []
        for u in arrived:
            genuine = len(vis[u] & vis[v])
            best = (genuine, 0)  # (count, fold); fold 0 means genuine
            if scene.k > 1 and confusion_rate > 0:
                for m in range(1, scene.k):
                    partner = scene.partner(m)
                    overlap = sum(1 for p in vis[u] if partner[p] >= 0 and int(partner[p]) in vis[v])
                    if overlap < confusion_similarity * min(len(vis[u]), len(vis[v])):
                        continue
                    conf = int(round(confusion_rate * overlap))
                    if conf > best[0]:
                        best = (conf, m)
            if best[0] > 0:
                scored.append((-best[0], u, best[1]))
        scored.sort()
        for negc, u, fold in scored[:top_m]:
            count = -negc
            if fold == 0:
                shared = sorted(vis[u] & vis[v])
                corr = np.array(
                    [[scene.kp_index[u][p], scene.kp_index[v][p]] for p in shared],
                    dtype=int,
                )
                R = scene.rotations[v] @ scene.rotations[u].T
                d = scene.rotations[v] @ (scene.centers[u] - scene.centers[v])
                label = GENUINE
            else:
                partner = scene.partner(fold)
                pairs = sorted(
                    (p, int(partner[p]))
                    for p in vis[u]
                    if partner[p] >= 0 and int(partner[p]) in vis[v]
                )
                pick = rng.choice(len(pairs), size=count, replace=False)
                pairs = [pairs[int(t)] for t in sorted(pick)]
                corr = np.array(
                    [[scene.kp_index[u][p], scene.kp_index[v][q]] for p, q in pairs],
                    dtype=int,
                )
                S = scene.symmetry_rotation(fold)
                R = scene.rotations[v] @ S @ scene.rotations[u].T
                d = scene.rotations[v] @ (S @ scene.centers[u] - scene.centers[v])
                label = CONFUSION
            if len(corr) == 0:
                continue
            nd = np.linalg.norm(d)
            if nd < 1e-9:
                # symmetric twin cameras coincide under the fold rotation:
                # the confusion pair is pure rotation and its baseline
                # direction is pure noise
                d = rng.standard_normal(3)
                nd = np.linalg.norm(d)
            geom = _noisy_geometry(R, d / nd, len(corr), noise, rng)
            event.edges.append(EdgeObservation(u, geom, corr, label))
        events.append(event)
        arrived.append(v)
    return events


@dataclass
class Metrics:
    clusters_raw: int = 0
    clusters_effective: int = 0
    registered_cameras: int = 0
    outlier_cameras: int = 0
    unaligned_cameras: int = 0
    recoveries: int = 0
    rmse_to_truth: float = 0.0

    def __post_init__(self):
        if self.outlier_cameras > self.registered_cameras:
            raise ValueError("outlier count cannot exceed registered count")


def evaluate(
    components: Sequence[Dict[int, np.ndarray]],
    scene: Scene,
    clusters_raw: int = 0,
    recoveries: int = 0,
) -> Metrics:
    """Score recovered camera positions against ground truth.

    components: one dict per effective cluster mapping view id to the
    recovered camera center (all members of a component share a frame).
    Each component with >= 3 cameras is aligned to ground truth by a
    robust similarity; a camera is an outlier when its aligned position
    error exceeds half the minimum ground-truth inter-camera distance.
    Components too small to align are reported separately.
    """
    d_min = scene.min_camera_distance()
    tol = 0.5 * d_min
    registered = 0
    outliers = 0
    unaligned = 0
    sq_errors = []
    for comp in components:
        views = sorted(comp)
        registered += len(views)
        if len(views) < 3:
            unaligned += len(views)
            continue
        est = np.array([comp[v] for v in views])
        gt = np.array([scene.centers[v] for v in views])
        res = ransac_sim3(est, gt, threshold=tol, seed=0)
        if res is not None:
            T = res.transform
        else:
            try:
                T = fit_sim3(est, gt)
            except ValueError:
                unaligned += len(views)
                registered -= 0
                continue
        err = np.linalg.norm(T.apply(est) - gt, axis=1)
        outliers += int(np.sum(err > tol))
        sq_errors.extend((err[err <= tol] ** 2).tolist())
    rmse = float(np.sqrt(np.mean(sq_errors))) if sq_errors else 0.0
    return Metrics(
        clusters_raw=clusters_raw,
        clusters_effective=len(components),
        registered_cameras=registered,
        outlier_cameras=outliers,
        unaligned_cameras=unaligned,
        recoveries=recoveries,
        rmse_to_truth=rmse,
    )
