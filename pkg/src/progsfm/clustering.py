"""Single-linkage clustering of the viewgraph on the Jaccard distance.

The clustering with the stop rule "no inter-cluster edge below the
threshold" is equivalent to connected components of the graph that keeps
exactly the edges with distance < eta; that form allows exact incremental
maintenance when a new view arrives.
"""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Set, Tuple

from .viewgraph import ViewGraph

DEFAULT_ETA = 0.2


@dataclass
class Partition:
    """Cluster assignment at one timestep."""

    assignment: Dict[int, int] = field(default_factory=dict)  # view -> cluster
    clusters: Dict[int, Set[int]] = field(default_factory=dict)  # cluster -> views
    generation: int = 0
    next_id: int = 0  # monotone cluster id counter, ids never reused in a run

    def membership(self) -> FrozenSet[FrozenSet[int]]:
        """Id-free view of the partition, for equality tests."""
        return frozenset(frozenset(m) for m in self.clusters.values())

    def check_consistent(self) -> None:
        views = set()
        for cid, members in self.clusters.items():
            if not members:
                raise AssertionError(f"empty cluster {cid}")
            for v in members:
                if self.assignment.get(v) != cid:
                    raise AssertionError(f"view {v} assignment mismatch")
                views.add(v)
        if views != set(self.assignment):
            raise AssertionError("assignment/clusters cover different view sets")


@dataclass
class TopologyDelta:
    """Tracked changes between two partitions.

    `added` is keyed by the new partition's cluster ids, `removed` by the
    old partition's ids. Transfer groups are maximal connected subsets of
    the views that moved together between one (source, destination) pair,
    connectivity taken from admitted viewgraph edges.
    """

    added: Dict[int, Set[int]] = field(default_factory=dict)
    removed: Dict[int, Set[int]] = field(default_factory=dict)
    transfers: List[Tuple[int, int, FrozenSet[int]]] = field(default_factory=list)
    unchanged_clusters: Set[int] = field(default_factory=set)


def _threshold_components(graph: ViewGraph, views: List[int], eta: float) -> List[List[int]]:
    """Connected components over `views` keeping edges with d < eta."""
    vset = set(views)
    parent = {v: v for v in views}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (i, j) in graph.edges():
        if i in vset and j in vset and graph.jaccard_distance(i, j) < eta:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    comps: Dict[int, List[int]] = {}
    for v in sorted(views):
        comps.setdefault(find(v), []).append(v)
    return [comps[r] for r in sorted(comps)]


def cluster_full(graph: ViewGraph, eta: float = DEFAULT_ETA) -> Partition:
    """Batch clustering; cluster ids are the lowest member view id."""
    part = Partition()
    for comp in _threshold_components(graph, graph.views(), eta):
        cid = comp[0]
        part.clusters[cid] = set(comp)
        for v in comp:
            part.assignment[v] = cid
    part.next_id = max(part.clusters, default=-1) + 1
    return part


def _match_components(
    components: List[List[int]], prev_clusters: Dict[int, Set[int]]
) -> Dict[int, int]:
    """Greedy max-overlap matching of new components to previous clusters.

    Returns component index -> previous cluster id. Ties are broken by the
    lowest view id contained in the overlap, then by lowest previous id.
    """
    pairs = []
    for ci, comp in enumerate(components):
        cset = set(comp)
        for pid, members in prev_clusters.items():
            overlap = cset & members
            if overlap:
                pairs.append((-len(overlap), min(overlap), pid, ci))
    pairs.sort()
    matched: Dict[int, int] = {}
    used_prev: Set[int] = set()
    for _neg, _tie, pid, ci in pairs:
        if ci in matched or pid in used_prev:
            continue
        matched[ci] = pid
        used_prev.add(pid)
    return matched


def cluster_incremental(
    prev: Partition, graph: ViewGraph, new_view: int, eta: float = DEFAULT_ETA
) -> Tuple[Partition, TopologyDelta]:
    """Update the partition for one new view, reclustering only the clusters
    reachable through edges whose distance the insertion may have changed."""
    changed = graph.edges_with_changed_distance(new_view)
    affected_clusters: Set[int] = set()
    for (a, b) in changed:
        for v in (a, b):
            if v in prev.assignment:
                affected_clusters.add(prev.assignment[v])
    affected_views: Set[int] = {new_view}
    for cid in affected_clusters:
        affected_views |= prev.clusters[cid]

    components = _threshold_components(graph, sorted(affected_views), eta)
    prev_affected = {cid: prev.clusters[cid] for cid in affected_clusters}
    matched = _match_components(components, prev_affected)

    part = Partition(generation=prev.generation + 1, next_id=prev.next_id)
    for cid in sorted(prev.clusters):
        if cid not in affected_clusters:
            part.clusters[cid] = set(prev.clusters[cid])
    for ci, comp in enumerate(components):
        if ci in matched:
            cid = matched[ci]
        else:
            cid = part.next_id
            part.next_id += 1
        part.clusters[cid] = set(comp)
    for cid, members in part.clusters.items():
        for v in members:
            part.assignment[v] = cid

    delta = diff_partitions(prev, part, graph)
    return part, delta


def diff_partitions(before: Partition, after: Partition, graph: ViewGraph) -> TopologyDelta:
    """Delta between two partitions covering the same views (modulo views
    added at the newer generation)."""
    # identity: shared ids with overlap first, then max-overlap matching
    mapping: Dict[int, int] = {}  # before id -> after id
    used_after: Set[int] = set()
    for bid in sorted(before.clusters):
        if bid in after.clusters and (before.clusters[bid] & after.clusters[bid]):
            mapping[bid] = bid
            used_after.add(bid)
    pairs = []
    for bid, bmembers in before.clusters.items():
        if bid in mapping:
            continue
        for aid, amembers in after.clusters.items():
            if aid in used_after:
                continue
            overlap = bmembers & amembers
            if overlap:
                pairs.append((-len(overlap), min(overlap), bid, aid))
    pairs.sort()
    for _neg, _tie, bid, aid in pairs:
        if bid in mapping or aid in used_after:
            continue
        mapping[bid] = aid
        used_after.add(aid)

    delta = TopologyDelta()
    before_of_view = before.assignment
    moved: Dict[Tuple[int, int], Set[int]] = {}  # (before cid, after cid) -> views
    for aid in sorted(after.clusters):
        amembers = after.clusters[aid]
        bid = next((b for b, a in mapping.items() if a == aid), None)
        bmembers = before.clusters.get(bid, set()) if bid is not None else set()
        if bid is not None and amembers == bmembers:
            delta.unchanged_clusters.add(aid)
            continue
        gained = amembers - bmembers
        if gained:
            delta.added[aid] = set(gained)
        for v in gained:
            if v in before_of_view:
                src = before_of_view[v]
                moved.setdefault((src, aid), set()).add(v)
    for bid in sorted(before.clusters):
        aid = mapping.get(bid)
        amembers = after.clusters.get(aid, set()) if aid is not None else set()
        lost = before.clusters[bid] - amembers
        if lost:
            delta.removed[bid] = set(lost)

    # group moved views into maximal connected subsets (admitted edges only)
    for (src, dst) in sorted(moved):
        group = moved[(src, dst)]
        parent = {v: v for v in group}

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for v in sorted(group):
            for n in graph.neighbors(v):
                if n in group:
                    rv, rn = find(v), find(n)
                    if rv != rn:
                        parent[max(rv, rn)] = min(rv, rn)
        comps: Dict[int, Set[int]] = {}
        for v in sorted(group):
            comps.setdefault(find(v), set()).add(v)
        for r in sorted(comps):
            delta.transfers.append((src, dst, frozenset(comps[r])))
    return delta
