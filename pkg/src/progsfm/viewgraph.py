"""Dynamic viewgraph: views, verified two-view geometries and match counts.

The graph stores one undirected edge per matched pair together with the
relative rotation / translation direction obtained from two-view geometry,
and exposes the weighted Jaccard connectivity distance used for clustering.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from . import so3

DEFAULT_MIN_CORRESPONDENCES = 16

ADMITTED = "admitted"
REJECTED = "rejected_below_threshold"

Edge = Tuple[int, int]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class RelativeGeometry:
    """Relative rotation, translation direction and inlier count of a pair.

    `rotation` maps coordinates in frame i to frame j, `direction` is the
    unit translation of the transform x_j = R_ij x_i + t_ij.
    """

    __slots__ = ("rotation", "direction", "inliers")

    def __init__(self, rotation: np.ndarray, direction: np.ndarray, inliers: int):
        rotation = np.asarray(rotation, dtype=float)
        direction = np.asarray(direction, dtype=float)
        so3.check_rotation(rotation, tol=1e-9)
        norm = np.linalg.norm(direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"translation direction must be unit norm, got {norm}")
        if inliers <= 0:
            raise ValueError("inlier count must be positive")
        self.rotation = rotation
        self.direction = direction
        self.inliers = int(inliers)

    def inverse(self) -> "RelativeGeometry":
        return RelativeGeometry(self.rotation.T, -self.rotation.T @ self.direction, self.inliers)

    def __repr__(self) -> str:
        return f"RelativeGeometry(inliers={self.inliers})"


def edge_key(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


class ViewGraph:
    """Undirected viewgraph with match counts and per-edge geometry."""

    def __init__(self, min_correspondences: int = DEFAULT_MIN_CORRESPONDENCES):
        self.min_correspondences = int(min_correspondences)
        self.intrinsics: Dict[int, CameraIntrinsics] = {}
        # canonical storage: key (i, j) with i < j, geometry oriented i -> j
        self._edges: Dict[Edge, RelativeGeometry] = {}
        self._adj: Dict[int, Dict[int, int]] = {}  # view -> neighbor -> inlier count

    # -- construction ---------------------------------------------------

    def add_view(self, intrinsics: CameraIntrinsics) -> int:
        vid = len(self.intrinsics)
        self.intrinsics[vid] = intrinsics
        self._adj[vid] = {}
        return vid

    def add_edge(self, i: int, j: int, geom: RelativeGeometry) -> str:
        if i == j:
            raise ValueError("self-edges are not allowed")
        for v in (i, j):
            if v not in self.intrinsics:
                raise KeyError(f"unknown view id {v}")
        if geom.inliers < self.min_correspondences:
            return REJECTED
        key = edge_key(i, j)
        stored = geom if (i, j) == key else geom.inverse()
        self._edges[key] = stored
        self._adj[i][j] = geom.inliers
        self._adj[j][i] = geom.inliers
        return ADMITTED

    # -- queries --------------------------------------------------------

    def __contains__(self, vid: int) -> bool:
        return vid in self.intrinsics

    @property
    def num_views(self) -> int:
        return len(self.intrinsics)

    def views(self) -> List[int]:
        return sorted(self.intrinsics)

    def has_edge(self, i: int, j: int) -> bool:
        return edge_key(i, j) in self._edges

    def edges(self) -> Iterator[Edge]:
        return iter(sorted(self._edges))

    def geometry(self, i: int, j: int) -> RelativeGeometry:
        """Relative geometry oriented from i to j."""
        key = edge_key(i, j)
        geom = self._edges[key]
        return geom if (i, j) == key else geom.inverse()

    def match_count(self, i: int, j: int) -> int:
        if i == j:
            return 0
        return self._adj.get(i, {}).get(j, 0)

    def neighbors(self, vid: int) -> List[int]:
        return sorted(self._adj.get(vid, {}))

    def weighted_degree(self, vid: int) -> int:
        return sum(self._adj.get(vid, {}).values())

    def jaccard_distance(self, i: int, j: int) -> float:
        """Weighted Jaccard connectivity distance in [0, 1].

        Shared-neighbor weight over total neighborhood weight; 1 when the
        two views have no matched neighbors at all.
        """
        for v in (i, j):
            if v not in self.intrinsics:
                raise KeyError(f"unknown view id {v}")
        adj_i = self._adj[i]
        adj_j = self._adj[j]
        denom = sum(adj_i.values()) + sum(adj_j.values())
        if denom == 0:
            return 1.0
        common = set(adj_i) & set(adj_j)
        num = sum(adj_i[n] + adj_j[n] for n in common)
        return 1.0 - num / denom

    def edges_with_changed_distance(self, new_view: int) -> Set[Edge]:
        """Edge pairs whose Jaccard distance may change after inserting
        new_view's edges: every edge with an endpoint adjacent to new_view,
        plus the edges incident to new_view itself."""
        affected = set(self._adj.get(new_view, {})) | {new_view}
        out: Set[Edge] = set()
        for (a, b) in self._edges:
            if a in affected or b in affected:
                out.add((a, b))
        return out

    # -- serialization --------------------------------------------------

    def to_json_dict(self) -> dict:
        views = [
            {"id": vid, "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}
            for vid, intr in sorted(self.intrinsics.items())
        ]
        edges = []
        for (i, j) in sorted(self._edges):
            geom = self._edges[(i, j)]
            edges.append(
                {
                    "i": i,
                    "j": j,
                    "quaternion_wxyz": so3.quat_from_rotation(geom.rotation).tolist(),
                    "direction_xyz": geom.direction.tolist(),
                    "inliers": geom.inliers,
                }
            )
        return {"min_correspondences": self.min_correspondences, "views": views, "edges": edges}

    @classmethod
    def from_json_dict(cls, data: dict) -> "ViewGraph":
        graph = cls(min_correspondences=data.get("min_correspondences", DEFAULT_MIN_CORRESPONDENCES))
        for v in sorted(data["views"], key=lambda d: d["id"]):
            vid = graph.add_view(CameraIntrinsics(v["fx"], v["fy"], v["cx"], v["cy"]))
            if vid != v["id"]:
                raise ValueError("view ids must be dense and in arrival order")
        for e in data["edges"]:
            R = so3.rotation_from_quat(np.array(e["quaternion_wxyz"]))
            direction = np.array(e["direction_xyz"])
            direction = direction / np.linalg.norm(direction)
            graph.add_edge(e["i"], e["j"], RelativeGeometry(R, direction, e["inliers"]))
        return graph


@dataclass
class Subgraph:
    """Cluster-local restriction of the viewgraph.

    Edges are keyed (i, j) with i < j and oriented i -> j; `weights` mirrors
    the inlier counts for convenience.
    """

    views: List[int]
    edges: Dict[Edge, RelativeGeometry] = field(default_factory=dict)

    @property
    def weights(self) -> Dict[Edge, int]:
        return {e: g.inliers for e, g in self.edges.items()}

    def neighbors(self, vid: int) -> List[int]:
        out = []
        for (a, b) in self.edges:
            if a == vid:
                out.append(b)
            elif b == vid:
                out.append(a)
        return sorted(out)

    def geometry(self, i: int, j: int) -> RelativeGeometry:
        key = edge_key(i, j)
        geom = self.edges[key]
        return geom if (i, j) == key else geom.inverse()

    def without_edges(self, removed: Set[Edge]) -> "Subgraph":
        removed = {edge_key(*e) for e in removed}
        return Subgraph(
            views=list(self.views),
            edges={e: g for e, g in self.edges.items() if e not in removed},
        )

    def connected_components(self) -> List[List[int]]:
        parent = {v: v for v in self.views}

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for (a, b) in self.edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        comps: Dict[int, List[int]] = {}
        for v in sorted(self.views):
            comps.setdefault(find(v), []).append(v)
        return [comps[r] for r in sorted(comps)]


def extract_subgraph(graph: ViewGraph, views) -> Subgraph:
    """Restrict the viewgraph to a set of views."""
    vset = set(views)
    sub = Subgraph(views=sorted(vset))
    for (i, j) in graph.edges():
        if i in vset and j in vset:
            sub.edges[(i, j)] = graph.geometry(i, j)
    return sub
