"""Robust L1 rotation averaging inside a cluster subgraph.

Global per-view rotations are seeded by chaining relative rotations along a
maximum-weight spanning tree and refined by IRLS on the Lie-algebraic
linearization; edges whose final relative error exceeds the threshold are
dropped from the cluster-local graph.
"""

from dataclasses import dataclass, field
from typing import Dict, Set, Tuple

import numpy as np

from . import so3
from .viewgraph import Edge, Subgraph

IRLS_EPSILON = 1e-5  # rad, residual floor in the IRLS weight
CONVERGENCE_TOL = 1e-3  # rad, max update angle
MAX_ITERATIONS = 100
DEFAULT_RHO_GMAX_DEG = 10.0
PRETRIM_DEG = 45.0  # edges this far off the spanning-tree init never enter IRLS


@dataclass
class GlobalRotations:
    """World-to-view rotations with a pinned gauge view."""

    rotations: Dict[int, np.ndarray]
    gauge: int

    def relative(self, i: int, j: int) -> np.ndarray:
        """Estimated relative rotation from view i to view j."""
        return self.rotations[j] @ self.rotations[i].T


@dataclass
class AveragingReport:
    removed_edges: Set[Edge] = field(default_factory=set)
    per_edge_residual_deg: Dict[Edge, float] = field(default_factory=dict)
    iterations: int = 0
    converged: bool = True


def mst_initialize(subgraph: Subgraph) -> GlobalRotations:
    """Chain relative rotations along a maximum-weight spanning tree.

    The gauge view (lowest id) gets the identity. Raises on a disconnected
    subgraph, listing the components.
    """
    views = sorted(subgraph.views)
    if not views:
        raise ValueError("empty subgraph")
    comps = subgraph.connected_components()
    if len(comps) > 1:
        raise ValueError(f"subgraph is disconnected; components: {comps}")
    gauge = views[0]
    rotations: Dict[int, np.ndarray] = {gauge: np.eye(3)}
    # Prim-style growth picking the heaviest crossing edge
    edges = sorted(subgraph.edges)
    remaining = set(views) - {gauge}
    while remaining:
        best = None
        for (a, b) in edges:
            w = subgraph.edges[(a, b)].inliers
            for (src, dst) in ((a, b), (b, a)):
                if src in rotations and dst in remaining:
                    cand = (w, -src, -dst, src, dst)
                    if best is None or cand > best:
                        best = cand
        assert best is not None  # connected, checked above
        _, _, _, src, dst = best
        rel = subgraph.geometry(src, dst)
        rotations[dst] = rel.rotation @ rotations[src]
        remaining.discard(dst)
    return GlobalRotations(rotations=rotations, gauge=gauge)


def _edge_residual(subgraph: Subgraph, rotations: GlobalRotations, edge: Edge) -> np.ndarray:
    i, j = edge
    R_ij = subgraph.edges[edge].rotation
    return so3.so3_log(rotations.rotations[j].T @ R_ij @ rotations.rotations[i])


def _objective(subgraph: Subgraph, rotations: GlobalRotations, rho: Dict[Edge, float]) -> float:
    return sum(
        rho[e] * np.linalg.norm(_edge_residual(subgraph, rotations, e)) for e in subgraph.edges
    )


def solve_l1(
    subgraph: Subgraph,
    init: GlobalRotations,
    eps_irls: float = IRLS_EPSILON,
    tol: float = CONVERGENCE_TOL,
    max_iterations: int = MAX_ITERATIONS,
) -> Tuple[GlobalRotations, int, bool]:
    """IRLS minimization of the weighted L1 norm of relative rotation errors.

    Edge weights are proportional to the match counts, normalized to mean
    one over the subgraph. Returns (rotations, iterations, converged); on
    hitting the iteration cap the best iterate is returned with
    converged=False.
    """
    views = sorted(subgraph.views)
    edges = sorted(subgraph.edges)
    current = GlobalRotations(
        rotations={v: init.rotations[v].copy() for v in views}, gauge=init.gauge
    )
    if not edges or len(views) < 2:
        return current, 0, True

    mean_w = np.mean([subgraph.edges[e].inliers for e in edges])
    rho = {e: subgraph.edges[e].inliers / mean_w for e in edges}

    idx = {v: k for k, v in enumerate(views)}
    free = [v for v in views if v != current.gauge]
    col = {v: k for k, v in enumerate(free)}
    n_free = len(free)

    ne = len(edges)
    rows_i = np.array([idx[e[0]] for e in edges])
    rows_j = np.array([idx[e[1]] for e in edges])
    rho_arr = np.array([rho[e] for e in edges])
    free_col = np.full(len(views), -1, dtype=int)
    for v, k in col.items():
        free_col[idx[v]] = k

    def solve_weighted_l1(b: np.ndarray) -> np.ndarray:
        """Inner IRLS for min sum_e rho_e |delta_i - delta_j - b_e| over the
        free views; starts from the weighted least-squares solution."""
        delta = np.zeros((n_free, 3))
        w = rho_arr.copy()
        for _inner in range(10):
            L = np.zeros((n_free, n_free))
            rhs = np.zeros((n_free, 3))
            ci = free_col[rows_i]
            cj = free_col[rows_j]
            for k in range(ne):
                a, c = ci[k], cj[k]
                if a >= 0:
                    L[a, a] += w[k]
                    rhs[a] += w[k] * b[k]
                if c >= 0:
                    L[c, c] += w[k]
                    rhs[c] -= w[k] * b[k]
                if a >= 0 and c >= 0:
                    L[a, c] -= w[k]
                    L[c, a] -= w[k]
            try:
                new_delta = np.linalg.solve(L + 1e-12 * np.eye(n_free), rhs)
            except np.linalg.LinAlgError:
                break
            change = np.max(np.linalg.norm(new_delta - delta, axis=1)) if n_free else 0.0
            delta = new_delta
            # linear residual per edge drives the reweighting
            r_lin = np.zeros((ne, 3))
            for k in range(ne):
                a, c = ci[k], cj[k]
                r = -b[k]
                if a >= 0:
                    r = r + delta[a]
                if c >= 0:
                    r = r - delta[c]
                r_lin[k] = r
            w = rho_arr / np.maximum(np.linalg.norm(r_lin, axis=1), eps_irls)
            if change < 0.1 * tol:
                break
        return delta

    obj = _objective(subgraph, current, rho)
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        # linearization: residual of edge (i, j) changes as w_rel + d_i - d_j,
        # so the inner problem is min sum rho |d_i - d_j - (-w_rel)|
        b = -np.array([_edge_residual(subgraph, current, e) for e in edges])
        delta = solve_weighted_l1(b)

        # backtracking step acceptance keeps the nonlinear L1 objective
        # non-increasing across accepted sweeps
        step = 1.0
        accepted = False
        for _ in range(12):
            cand = GlobalRotations(
                rotations={
                    v: (
                        current.rotations[v] @ so3.so3_exp(step * delta[col[v]])
                        if v in col
                        else current.rotations[v]
                    )
                    for v in views
                },
                gauge=current.gauge,
            )
            cand_obj = _objective(subgraph, cand, rho)
            if cand_obj <= obj + 1e-15:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        max_update = step * np.max(np.linalg.norm(delta, axis=1)) if n_free else 0.0
        current, obj = cand, cand_obj
        if max_update < tol:
            converged = True
            break
    return current, it, converged


def filter_edges(
    subgraph: Subgraph,
    rotations: GlobalRotations,
    rho_gmax_deg: float = DEFAULT_RHO_GMAX_DEG,
    iterations: int = 0,
    converged: bool = True,
) -> AveragingReport:
    """Flag edges whose relative error against the averaged rotations
    exceeds the threshold (strict inequality; a residual exactly at the
    threshold is kept)."""
    report = AveragingReport(iterations=iterations, converged=converged)
    for e in sorted(subgraph.edges):
        i, j = e
        R_ij = subgraph.edges[e].rotation
        err = so3.rotation_angle_deg(R_ij @ rotations.relative(i, j).T)
        report.per_edge_residual_deg[e] = err
        if err > rho_gmax_deg:
            report.removed_edges.add(e)
    return report


def _truncated_cost(subgraph: Subgraph, rotations: GlobalRotations) -> float:
    """Match-weighted L1 cost with per-edge residuals capped, so gross
    outlier edges cannot dominate the comparison between candidates."""
    edges = sorted(subgraph.edges)
    mean_w = np.mean([subgraph.edges[e].inliers for e in edges])
    cap = np.radians(PRETRIM_DEG)
    return sum(
        (subgraph.edges[e].inliers / mean_w)
        * min(np.linalg.norm(_edge_residual(subgraph, rotations, e)), cap)
        for e in edges
    )


def average_cluster_rotations(
    subgraph: Subgraph, rho_gmax_deg: float = DEFAULT_RHO_GMAX_DEG
) -> Tuple[GlobalRotations, AveragingReport]:
    """MST init, L1 refinement and edge filtering in one call.

    After the first filtering pass the solve is repeated on the cleaned
    subgraph (when it stays connected), so the returned rotations are not
    dragged by the removed outlier edges; the report is recomputed against
    the full subgraph with those final rotations.
    """
    init = mst_initialize(subgraph)
    rotations, iterations, converged = solve_l1(subgraph, init)
    # a consistent family of wrong loop closures can pull the L1 solution
    # into a smooth warp where every edge residual looks acceptable. As a
    # second candidate, edges grossly inconsistent with the heaviest-tree
    # chaining are held out of the solve; the candidate with the lower
    # truncated cost over the full edge set wins, so a bad spanning tree
    # cannot lock in its own interpretation either.
    pretrim = {
        e
        for e in subgraph.edges
        if np.degrees(np.linalg.norm(_edge_residual(subgraph, init, e))) > PRETRIM_DEG
    }
    if pretrim:
        cleaned = subgraph.without_edges(pretrim)
        if len(cleaned.connected_components()) == 1:
            alt, it2, conv2 = solve_l1(cleaned, init)
            if _truncated_cost(subgraph, alt) < _truncated_cost(subgraph, rotations):
                rotations, iterations, converged = alt, iterations + it2, conv2
    report = filter_edges(
        subgraph, rotations, rho_gmax_deg, iterations=iterations, converged=converged
    )
    if report.removed_edges:
        cleaned = subgraph.without_edges(report.removed_edges)
        if len(cleaned.connected_components()) == 1:
            rotations, it2, converged = solve_l1(cleaned, rotations)
            iterations += it2
            report = filter_edges(
                subgraph, rotations, rho_gmax_deg, iterations=iterations, converged=converged
            )
    return rotations, report


def align_gauge(
    estimated: Dict[int, np.ndarray], reference: Dict[int, np.ndarray]
) -> Dict[int, np.ndarray]:
    """Right-multiply the estimates by the single rotation best aligning
    them with the reference (chordal L2 mean), for gauge-free comparison."""
    common = sorted(set(estimated) & set(reference))
    M = np.zeros((3, 3))
    for v in common:
        M += estimated[v].T @ reference[v]
    U, _, Vt = np.linalg.svd(M)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    G = U @ S @ Vt
    return {v: estimated[v] @ G for v in common}
