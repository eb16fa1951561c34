"""Placing per-cluster reconstructions in a common frame.

Inter-cluster edges propose Sim(3) transforms from 3D-3D track pairs; the
neighborhood-similarity check rejects transforms that interleave the two
camera sets (the signature of symmetry-induced false overlaps); surviving
constraints are aggregated per cluster pair and the cluster poses are
optimized on a robust pose graph.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .sim3 import Sim3, fit_sim3, ransac_sim3
from .viewgraph import edge_key

DEFAULT_LAMBDA_C = 0.9
HUBER_SCALE = 0.1
POSE_GRAPH_MAX_ITERATIONS = 50
POSE_GRAPH_TOL = 1e-10
OUTLIER_RESIDUAL_FACTOR = 10.0
SIM3_THRESHOLD_FRACTION = 0.02  # of the destination cluster's scene diameter


@dataclass
class SimilarityScore:
    s: float
    per_camera: Dict[Tuple[str, int], int]


@dataclass
class ClusterConstraint:
    a: int
    b: int
    transform: Sim3  # maps a-frame coordinates into the b-frame
    weight: int


@dataclass
class ClusterGraph:
    nodes: Dict[int, Sim3] = field(default_factory=dict)
    edges: List[ClusterConstraint] = field(default_factory=list)

    def components(self) -> List[List[int]]:
        parent = {c: c for c in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            ra, rb = find(e.a), find(e.b)
            if ra != rb:
                parent[ra] = rb
        groups: Dict[int, List[int]] = {}
        for c in sorted(self.nodes):
            groups.setdefault(find(c), []).append(c)
        return sorted(groups.values())

    @property
    def effective_clusters(self) -> int:
        return len(self.components())


def neighborhood_similarity(
    centers_a: Dict[int, np.ndarray],
    centers_b: Dict[int, np.ndarray],
    transform: Sim3,
) -> SimilarityScore:
    """Fraction of cameras whose nearest neighbor survives the merge.

    Cluster a's centers are mapped through the transform and pooled with
    cluster b's. A camera from a scores 1 when its nearest neighbor within
    a (mapped) is still its nearest neighbor in the pool; likewise for b
    against its own intra-cluster neighbor. Equidistant ties break toward
    cluster a first, then the lower view id.
    """
    if len(centers_a) < 2 or len(centers_b) < 2:
        raise ValueError("neighborhood similarity needs >= 2 cameras per cluster")
    labels: List[Tuple[str, int]] = []
    pool: List[np.ndarray] = []
    for v in sorted(centers_a):
        labels.append(("a", v))
        pool.append(transform.apply(centers_a[v]))
    for v in sorted(centers_b):
        labels.append(("b", v))
        pool.append(np.asarray(centers_b[v], dtype=float))
    P = np.array(pool)
    n = len(labels)
    D = np.linalg.norm(P[:, None] - P[None, :], axis=2)
    np.fill_diagonal(D, np.inf)

    def nearest(k: int, allowed: Sequence[int]) -> int:
        best = min(allowed, key=lambda m: (D[k, m], labels[m]))
        return best

    idx_a = [k for k in range(n) if labels[k][0] == "a"]
    idx_b = [k for k in range(n) if labels[k][0] == "b"]
    per_camera: Dict[Tuple[str, int], int] = {}
    everyone = list(range(n))
    for k in range(n):
        own = idx_a if labels[k][0] == "a" else idx_b
        own_others = [m for m in own if m != k]
        nn_own = nearest(k, own_others)
        nn_pool = nearest(k, everyone)
        per_camera[labels[k]] = int(nn_own == nn_pool)
    s = float(np.mean(list(per_camera.values())))
    return SimilarityScore(s=s, per_camera=per_camera)


def _track_key_map(recon) -> Dict[Tuple[int, int], int]:
    out = {}
    for idx, t in enumerate(recon.tracks):
        if t.state != "triangulated":
            continue
        for v, k in t.keypoints.items():
            out[(v, k)] = idx
    return out


def _cluster_diameter(recon) -> float:
    pts = [t.point for t in recon.tracks if t.point is not None]
    pts += [recon.poses[v].center for v in recon.registered]
    P = np.array(pts)
    c = P.mean(axis=0)
    return 2.0 * float(np.max(np.linalg.norm(P - c, axis=1)))


def collect_constraints(
    reconstructions: Dict[int, "LocalReconstruction"],
    assignment: Dict[int, int],
    graph,
    provider,
    lambda_c: float = DEFAULT_LAMBDA_C,
    seed: int = 0,
) -> ClusterGraph:
    """Two-stage constraint harvesting over inter-cluster view-graph edges.

    Stage 1 estimates a robust Sim(3) per edge from track pairs
    triangulated on both sides and drops edges whose neighborhood
    similarity falls below lambda_c. Stage 2 refits a single constraint
    per cluster pair from the union of all surviving edges' pairs.
    """
    out = ClusterGraph()
    for cid, recon in reconstructions.items():
        if recon is not None and not recon.is_empty():
            out.nodes[cid] = Sim3.identity()
    key_maps = {cid: _track_key_map(r) for cid, r in reconstructions.items() if cid in out.nodes}
    centers = {
        cid: {v: reconstructions[cid].poses[v].center for v in reconstructions[cid].registered}
        for cid in out.nodes
    }
    diameters = {cid: _cluster_diameter(reconstructions[cid]) for cid in out.nodes}

    surviving: Dict[Tuple[int, int], List[Tuple[Sim3, List[Tuple[np.ndarray, np.ndarray]]]]] = {}
    for (i, j) in graph.edges():
        ca = assignment.get(i)
        cb = assignment.get(j)
        if ca is None or cb is None or ca == cb:
            continue
        if ca not in out.nodes or cb not in out.nodes:
            continue
        if i not in reconstructions[ca].registered or j not in reconstructions[cb].registered:
            continue
        if ca > cb:
            ca, cb, i, j = cb, ca, j, i
        ii, jj = (i, j) if i < j else (j, i)
        corr = provider.correspondences(ii, jj)
        view_a, view_b = (ii, jj) if assignment[ii] == ca else (jj, ii)
        pairs = []
        for row in corr:
            ka, kb = (int(row[0]), int(row[1])) if view_a == ii else (int(row[1]), int(row[0]))
            ta = key_maps[ca].get((view_a, ka))
            tb = key_maps[cb].get((view_b, kb))
            if ta is None or tb is None:
                continue
            pairs.append(
                (reconstructions[ca].tracks[ta].point, reconstructions[cb].tracks[tb].point)
            )
        if len(pairs) < 3:
            continue
        src = np.array([p for p, _ in pairs])
        dst = np.array([q for _, q in pairs])
        res = ransac_sim3(
            src, dst, threshold=SIM3_THRESHOLD_FRACTION * diameters[cb], seed=seed ^ (i * 73856093 + j)
        )
        if res is None:
            continue
        if len(centers[ca]) >= 2 and len(centers[cb]) >= 2:
            score = neighborhood_similarity(centers[ca], centers[cb], res.transform)
            if score.s < lambda_c:
                continue
        inl = res.inlier_mask
        surviving.setdefault((ca, cb), []).append(
            (res.transform, [(src[k], dst[k]) for k in np.where(inl)[0]])
        )
    # stage 2: per cluster pair, the edges vote. A symmetric structure can
    # slip a handful of false edges past the similarity check and those
    # propose a rival transform; pooling everything would let a RANSAC
    # draw pick either side, so instead edges are grouped into families of
    # mutually consistent transforms and only the best-supported family
    # contributes to the refit.
    for (ca, cb) in sorted(surviving):
        proposals = surviving[(ca, cb)]
        pts_a = np.array([centers[ca][v] for v in sorted(centers[ca])])
        tol = 0.1 * diameters[cb]
        families: List[List[int]] = []
        for k, (T, _) in enumerate(proposals):
            placed = False
            for fam in families:
                T0 = proposals[fam[0]][0]
                if np.max(np.linalg.norm(T.apply(pts_a) - T0.apply(pts_a), axis=1)) < tol:
                    fam.append(k)
                    placed = True
                    break
            if not placed:
                families.append([k])
        best = max(families, key=lambda f: sum(len(proposals[k][1]) for k in f))
        pairs = [p for k in best for p in proposals[k][1]]
        src = np.array([p for p, _ in pairs])
        dst = np.array([q for _, q in pairs])
        res = ransac_sim3(
            src, dst, threshold=SIM3_THRESHOLD_FRACTION * diameters[cb], seed=seed ^ (ca * 19349663 + cb)
        )
        if res is None:
            continue
        out.edges.append(
            ClusterConstraint(ca, cb, res.transform, int(res.inlier_mask.sum()))
        )
    return out


# -- pose graph ----------------------------------------------------------


def _residual(pose_a: Sim3, pose_b: Sim3, constraint: Sim3, inv_b_mean: float) -> np.ndarray:
    """7-vector error of one constraint: zero when pose_a == pose_b ∘ T."""
    E = pose_b.compose(constraint).compose(pose_a.inverse())
    r = E.to_vector()
    r[3:6] *= inv_b_mean
    return r


def _huber_weights(r: np.ndarray, scale: float) -> np.ndarray:
    """IRLS weight per residual component; the loss acts on each
    constraint's whole 7-vector norm so one gross outlier has bounded
    total influence instead of a constant pull per component."""
    norms = np.linalg.norm(r.reshape(-1, 7), axis=1)
    w_edge = np.where(norms > scale, scale / np.maximum(norms, 1e-300), 1.0)
    return np.repeat(w_edge, 7)


def robust_cost(r: np.ndarray, scale: float) -> float:
    a = np.linalg.norm(r.reshape(-1, 7), axis=1)
    quad = a <= scale
    out = np.empty_like(a)
    out[quad] = 0.5 * a[quad] ** 2
    out[~quad] = scale * (a[~quad] - 0.5 * scale)
    return float(out.sum())


def optimize_cluster_poses(
    graph: ClusterGraph,
    huber_scale: float = HUBER_SCALE,
    max_iterations: int = POSE_GRAPH_MAX_ITERATIONS,
) -> Dict[int, Sim3]:
    """Gauss-Newton on the cluster pose graph with a Huber loss on each
    constraint's residual norm; each connected component is solved
    independently with its lowest cluster id pinned to the identity.
    Initialization chains constraints along a spanning tree.  Constraints
    whose converged residual still dwarfs the Huber scale are dropped (if
    that keeps the component connected) and the cleaned graph re-solved,
    so a gross outlier leaves no residual bias."""
    poses = {c: Sim3.identity() for c in graph.nodes}
    if not graph.edges:
        return poses
    b_mean = float(np.mean([np.linalg.norm(e.transform.translation) for e in graph.edges]))
    inv_b = 1.0 / max(b_mean, 1e-12)

    for comp in graph.components():
        root = comp[0]
        comp_set = set(comp)
        comp_edges = [e for e in graph.edges if e.a in comp_set]
        if not comp_edges:
            continue
        # spanning-tree initialization from the pinned root
        adj: Dict[int, List[Tuple[int, Sim3]]] = {c: [] for c in comp}
        for e in comp_edges:
            # pose_a = pose_b ∘ T, so crossing a->b composes with T⁻¹
            adj[e.a].append((e.b, e.transform.inverse()))
            adj[e.b].append((e.a, e.transform))
        seen = {root}
        stack = [root]
        while stack:
            cur = stack.pop()
            for nxt, rel in sorted(adj[cur], key=lambda x: x[0]):
                if nxt in seen:
                    continue
                # adj stores rel such that pose_nxt = pose_cur ∘ rel:
                # crossing a->b holds pose_b = pose_a ∘ T⁻¹, b->a uses T
                poses[nxt] = poses[cur].compose(rel)
                seen.add(nxt)
                stack.append(nxt)
        free = [c for c in comp if c != root]
        if not free:
            continue
        col = {c: 7 * k for k, c in enumerate(free)}
        n_par = 7 * len(free)

        def perturbed(poses, delta):
            new = dict(poses)
            for c in free:
                d = delta[col[c] : col[c] + 7]
                new[c] = Sim3.from_vector(d).compose(poses[c])
            return new

        mean_w = float(np.mean([max(e.weight, 1) for e in comp_edges]))

        def edge_scales(edges):
            # heavier constraints (more supporting matches) pull harder, so
            # a conflict between a strong and a weak constraint lands on
            # the weak one instead of being split down the middle
            return np.sqrt(np.array([max(e.weight, 1) / mean_w for e in edges]))

        def solve(edges, poses, anneal):
            wfac = edge_scales(edges)

            def residual_vec(poses):
                return np.concatenate(
                    [
                        w * _residual(poses[e.a], poses[e.b], e.transform, inv_b)
                        for w, e in zip(wfac, edges)
                    ]
                )

            r = residual_vec(poses)
            lam = 1e-6
            eps = 1e-7
            # graduated robustness: start near least squares and anneal the
            # scale down to the target so a spanning-tree initialization that
            # chained through an outlier constraint can still escape its basin
            schedule = [huber_scale * f for f in (8.0, 4.0, 2.0, 1.0)] if anneal else [huber_scale]
            for scale in schedule:
                cost = robust_cost(r, scale)
                rounds = max_iterations if scale == huber_scale else min(
                    max_iterations, max(2, max_iterations // 4)
                )
                poses, r, cost, lam = _gauss_newton_rounds(
                    poses, r, cost, lam, scale, rounds, residual_vec, perturbed, free, col, n_par, eps
                )
            return poses, r

        poses_c = {c: poses[c] for c in comp}
        poses_c, r = solve(comp_edges, poses_c, anneal=True)
        if max_iterations > 0:
            # iteratively shed the worst surviving constraint (geometric,
            # unweighted residual) while the component stays connected
            active = list(comp_edges)
            for _ in range(len(comp_edges)):
                norms = np.linalg.norm(r.reshape(-1, 7), axis=1) / edge_scales(active)
                worst = int(np.argmax(norms))
                if norms[worst] <= OUTLIER_RESIDUAL_FACTOR * huber_scale:
                    break
                kept = active[:worst] + active[worst + 1 :]
                if not _spans(comp, kept):
                    break
                active = kept
                poses_c, r = solve(active, poses_c, anneal=False)
        poses.update(poses_c)
    return poses


def _spans(comp: List[int], edges: List[ClusterConstraint]) -> bool:
    """True when `edges` connect every node in `comp`."""
    parent = {c: c for c in comp}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        parent[find(e.a)] = find(e.b)
    return len({find(c) for c in comp}) == 1


def _gauss_newton_rounds(poses, r, cost, lam, huber_scale, max_iterations, residual_vec, perturbed, free, col, n_par, eps):
    for _ in range(max_iterations):
        # numerical Jacobian of the stacked residual (small systems)
        J = np.zeros((len(r), n_par))
        for c in free:
            for a in range(7):
                d = np.zeros(n_par)
                d[col[c] + a] = eps
                J[:, col[c] + a] = (residual_vec(perturbed(poses, d)) - r) / eps
        w = _huber_weights(r, huber_scale)
        JW = J * w[:, None]
        H = JW.T @ J
        g = JW.T @ r
        accepted = False
        for _try in range(10):
            try:
                delta = np.linalg.solve(H + lam * np.eye(n_par), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = perturbed(poses, delta)
            r2 = residual_vec(cand)
            cost2 = robust_cost(r2, huber_scale)
            if cost2 < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        drop = (cost - cost2) / max(cost, 1e-300)
        poses, r, cost = cand, r2, cost2
        lam = max(lam / 3, 1e-12)
        if drop < POSE_GRAPH_TOL:
            break
    return poses, r, cost, lam
