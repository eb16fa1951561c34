"""Per-event orchestration: ingest, cluster, average, reconstruct, register.

The pipeline owns the viewgraph, the incremental partition, one local
reconstruction per cluster and the cluster pose graph. Views are re-indexed
densely in arrival order; every snapshot reports the caller's original ids.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .clustering import DEFAULT_ETA, Partition, cluster_incremental
from .registration import (
    DEFAULT_LAMBDA_C,
    ClusterGraph,
    collect_constraints,
    optimize_cluster_poses,
)
from .reconstruction import (
    LocalReconstruction,
    ReconstructionParams,
    extract_submodel,
    reconstruct_cluster,
    transfer_submodel,
)
from .rotation_averaging import DEFAULT_RHO_GMAX_DEG, average_cluster_rotations
from .simulator import MatchEvent, Metrics
from .viewgraph import ViewGraph, extract_subgraph


@dataclass
class PipelineParams:
    eta: float = DEFAULT_ETA
    min_correspondences: int = 16
    rho_gmax_deg: float = DEFAULT_RHO_GMAX_DEG
    lambda_c: float = DEFAULT_LAMBDA_C
    recon: ReconstructionParams = field(default_factory=ReconstructionParams)
    seed: int = 0


@dataclass
class ClusterSummary:
    cluster: int
    n_views: int
    n_registered: int
    n_points: int
    rmse_px: float
    rho_l_deg: float
    reset: bool


@dataclass
class Snapshot:
    timestep: int
    view: int  # caller's id of the view ingested at this timestep
    clusters_raw: int
    clusters_effective: int
    cluster_summaries: List[ClusterSummary]
    cluster_edges: List[Tuple[int, int, int]]  # (cluster a, cluster b, weight)
    metrics: Metrics
    recoveries_this_step: int
    recoveries_total: int


class MatchStore:
    """Correspondence accumulator doubling as the provider handed to
    reconstruction and registration. Keypoints are fetched lazily from the
    source (keyed by the caller's view ids) and cached under internal ids;
    correspondences are stored once per unordered pair, last write wins."""

    def __init__(self, source):
        self._source = source
        self._ext: List[int] = []
        self._kp: Dict[int, np.ndarray] = {}
        self._corr: Dict[Tuple[int, int], np.ndarray] = {}

    def add_view(self, ext_id: int) -> None:
        self._ext.append(ext_id)

    def external_id(self, view: int) -> int:
        return self._ext[view]

    def keypoints(self, view: int) -> np.ndarray:
        if view not in self._kp:
            self._kp[view] = np.asarray(self._source.keypoints(self._ext[view]), dtype=float)
        return self._kp[view]

    def add_correspondences(self, i: int, j: int, corr: np.ndarray) -> None:
        corr = np.asarray(corr, dtype=int).reshape(-1, 2)
        if i > j:
            i, j = j, i
            corr = corr[:, ::-1]
        self._corr[(i, j)] = corr

    def correspondences(self, i: int, j: int) -> np.ndarray:
        a, b = (i, j) if i < j else (j, i)
        corr = self._corr.get((a, b))
        if corr is None:
            return np.zeros((0, 2), dtype=int)
        return corr if (i, j) == (a, b) else corr[:, ::-1]


def _mix_seed(seed: int, cluster_id: int) -> int:
    return seed ^ ((cluster_id * 0x9E3779B1) & 0x7FFFFFFF)


class PipelineState:
    """Sequential progressive-SfM state folded over a match-event stream.

    `source` supplies keypoints(view) and intrinsics(view) for the caller's
    view ids. An optional `evaluator` maps the registered components (dicts
    of caller view id -> center, plus raw cluster and recovery counts) to a
    Metrics; without one, snapshots carry structural counts only.
    """

    def __init__(self, source, params: Optional[PipelineParams] = None, evaluator=None):
        self.params = params or PipelineParams()
        self.graph = ViewGraph(min_correspondences=self.params.min_correspondences)
        self.partition = Partition()
        self.matches = MatchStore(source)
        self._source = source
        self._ext2int: Dict[int, int] = {}
        self.reconstructions: Dict[int, LocalReconstruction] = {}
        self.cluster_info: Dict[int, Dict] = {}
        self.cluster_graph = ClusterGraph()
        self.cluster_poses: Dict[int, "object"] = {}
        self.recoveries_total = 0
        self.timestep = -1
        self.reconstruction_runs = 0  # instrumentation: dispatcher invocations
        self.evaluator = evaluator

    # -- event ingestion --------------------------------------------------

    def _validate(self, event: MatchEvent) -> None:
        if event.view in self._ext2int:
            raise ValueError(f"view {event.view} already ingested")
        for e in event.edges:
            if e.other not in self._ext2int:
                raise ValueError(f"edge references unknown view {e.other}")
            corr = np.asarray(e.correspondences)
            if corr.ndim != 2 or corr.shape[1] != 2:
                raise ValueError(f"malformed correspondences for edge to view {e.other}")
        others = [e.other for e in event.edges]
        if len(others) != len(set(others)):
            raise ValueError("duplicate edge in event")

    def process_event(self, event: MatchEvent) -> Snapshot:
        self._validate(event)
        self.timestep += 1
        vid = self.graph.add_view(self._source.intrinsics(event.view))
        self._ext2int[event.view] = vid
        self.matches.add_view(event.view)
        for e in event.edges:
            u = self._ext2int[e.other]
            self.matches.add_correspondences(u, vid, e.correspondences)
            self.graph.add_edge(u, vid, e.geom)

        prev = self.partition
        self.partition, delta = cluster_incremental(prev, self.graph, vid, self.params.eta)

        old_recons = dict(self.reconstructions)
        recoveries_this_step = 0
        changed = [c for c in self.partition.clusters if c not in delta.unchanged_clusters]
        for cid in sorted(changed):
            recoveries_this_step += self._rebuild_cluster(cid, prev, delta, old_recons)
        for cid in list(self.reconstructions):
            if cid not in self.partition.clusters:
                self.reconstructions.pop(cid, None)
                self.cluster_info.pop(cid, None)
        self.recoveries_total += recoveries_this_step

        self.cluster_graph = collect_constraints(
            self.reconstructions,
            self.partition.assignment,
            self.graph,
            self.matches,
            lambda_c=self.params.lambda_c,
            seed=self.params.seed,
        )
        self.cluster_poses = optimize_cluster_poses(self.cluster_graph)
        return self._snapshot(event.view, recoveries_this_step)

    def _rebuild_cluster(self, cid: int, prev: Partition, delta, old_recons) -> int:
        views = sorted(self.partition.clusters[cid])
        subgraph = extract_subgraph(self.graph, views)
        rotations, report = average_cluster_rotations(subgraph, self.params.rho_gmax_deg)
        if report.removed_edges:
            subgraph = subgraph.without_edges(report.removed_edges)
        intrinsics = {v: self.graph.intrinsics[v] for v in views}
        seed = _mix_seed(self.params.seed, cid)

        prior = old_recons.get(cid) if cid in prev.clusters else None
        if prior is not None and not prior.registered <= set(views):
            # views that left the cluster must not linger in its model
            prior = extract_submodel(prior, set(views), cid)
            if prior.is_empty():
                prior = None
        for src, dst, group in delta.transfers:
            if dst != cid:
                continue
            source_model = old_recons.get(src)
            if source_model is None or source_model.is_empty():
                continue
            grafted = transfer_submodel(
                source_model,
                set(group),
                prior,
                self.matches,
                subgraph,
                intrinsics,
                cid,
                params=self.params.recon,
                seed=seed,
            )
            if grafted is not None:
                prior = grafted

        # clusters below the minimum size carry no reconstruction at all:
        # a sub-minimal fragment's model (typically a near-degenerate two
        # view geometry left over from a split) would register into the
        # cluster graph with an unreliable similarity
        if len(views) < self.params.recon.mu_min:
            self.reconstructions.pop(cid, None)
            self.cluster_info.pop(cid, None)
            return 0

        self.reconstruction_runs += 1
        recon, info = reconstruct_cluster(
            cid,
            views,
            subgraph,
            rotations,
            self.matches,
            intrinsics,
            prior=prior,
            params=self.params.recon,
            seed=seed,
        )
        if recon.is_empty():
            self.reconstructions.pop(cid, None)
        else:
            self.reconstructions[cid] = recon
        self.cluster_info[cid] = info
        return 1 if info.get("reset") else 0

    # -- reporting ---------------------------------------------------------

    def components(self) -> List[Dict[int, np.ndarray]]:
        """Registered camera centers per effective cluster, in each
        component's common frame, keyed by the caller's view ids."""
        out = []
        for comp in self.cluster_graph.components():
            centers: Dict[int, np.ndarray] = {}
            for cid in comp:
                recon = self.reconstructions.get(cid)
                if recon is None:
                    continue
                T = self.cluster_poses.get(cid)
                for v in recon.registered:
                    c = recon.poses[v].center
                    centers[self.matches.external_id(v)] = T.apply(c[None, :])[0] if T is not None else c.copy()
            if centers:
                out.append(centers)
        return out

    def _snapshot(self, ext_view: int, recoveries_this_step: int) -> Snapshot:
        raw = len(self.reconstructions)
        effective = self.cluster_graph.effective_clusters
        summaries = []
        for cid in sorted(self.reconstructions):
            recon = self.reconstructions[cid]
            info = self.cluster_info.get(cid, {})
            intr = {v: self.graph.intrinsics[v] for v in recon.registered}
            summaries.append(
                ClusterSummary(
                    cluster=cid,
                    n_views=len(self.partition.clusters.get(cid, ())),
                    n_registered=len(recon.registered),
                    n_points=recon.num_points,
                    rmse_px=recon.reprojection_rmse(intr),
                    rho_l_deg=float(info.get("rho_l_deg", 0.0)),
                    reset=bool(info.get("reset", False)),
                )
            )
        edges = [(e.a, e.b, e.weight) for e in self.cluster_graph.edges]
        if self.evaluator is not None:
            metrics = self.evaluator(self.components(), raw, self.recoveries_total)
        else:
            registered = sum(len(r.registered) for r in self.reconstructions.values())
            metrics = Metrics(
                clusters_raw=raw,
                clusters_effective=effective,
                registered_cameras=registered,
                recoveries=self.recoveries_total,
            )
        return Snapshot(
            timestep=self.timestep,
            view=ext_view,
            clusters_raw=raw,
            clusters_effective=effective,
            cluster_summaries=summaries,
            cluster_edges=edges,
            metrics=metrics,
            recoveries_this_step=recoveries_this_step,
            recoveries_total=self.recoveries_total,
        )
