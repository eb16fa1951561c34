import numpy as np
import pytest

from progsfm import so3
from progsfm.viewgraph import (
    ADMITTED,
    REJECTED,
    CameraIntrinsics,
    RelativeGeometry,
    ViewGraph,
    extract_subgraph,
)

INTR = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def geom(inliers=100, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(3)
    return RelativeGeometry(so3.random_rotation(rng), t / np.linalg.norm(t), inliers)


def graph_with(n):
    g = ViewGraph()
    for _ in range(n):
        g.add_view(INTR)
    return g


def test_add_view_ids_dense_and_increasing():
    g = ViewGraph()
    assert g.add_view(INTR) == 0
    g5 = graph_with(5)
    assert g5.add_view(INTR) == 5
    assert g5.add_view(INTR) == 6
    assert g5.add_view(INTR) == 7


def test_add_edge_admission():
    g = graph_with(2)
    assert g.add_edge(0, 1, geom(100)) == ADMITTED
    assert g.match_count(0, 1) == 100
    assert g.match_count(1, 0) == 100


def test_add_edge_below_threshold_rejected():
    g = graph_with(2)
    assert g.add_edge(0, 1, geom(3)) == REJECTED
    assert not g.has_edge(0, 1)
    assert g.match_count(0, 1) == 0


def test_duplicate_edge_replaces():
    g = graph_with(2)
    g.add_edge(0, 1, geom(50, seed=1))
    g.add_edge(0, 1, geom(90, seed=2))
    assert g.match_count(0, 1) == 90


def test_add_edge_errors():
    g = graph_with(2)
    with pytest.raises(ValueError):
        g.add_edge(0, 0, geom())
    with pytest.raises(KeyError):
        g.add_edge(0, 7, geom())


def test_geometry_orientation_round_trip():
    g = graph_with(2)
    ge = geom(100, seed=4)
    g.add_edge(1, 0, ge)  # insert in reversed order
    back = g.geometry(1, 0)
    assert np.allclose(back.rotation, ge.rotation, atol=1e-12)
    assert np.allclose(back.direction, ge.direction, atol=1e-12)
    inv = g.geometry(0, 1)
    assert np.allclose(inv.rotation, ge.rotation.T, atol=1e-12)


def test_relative_geometry_invariants():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        RelativeGeometry(np.eye(3) * 1.001, np.array([1.0, 0, 0]), 10)
    with pytest.raises(ValueError):
        RelativeGeometry(np.eye(3), np.array([1.0, 1.0, 0]), 10)
    with pytest.raises(ValueError):
        RelativeGeometry(so3.random_rotation(rng), np.array([1.0, 0, 0]), 0)


def test_jaccard_identical_neighborhoods():
    # i=0 and j=1 share neighbors 2, 3 with equal weights; no private ones
    g = graph_with(4)
    for n in (2, 3):
        g.add_edge(0, n, geom(50))
        g.add_edge(1, n, geom(50))
    assert g.jaccard_distance(0, 1) == 0.0


def test_jaccard_no_common_neighbor_is_one():
    g = graph_with(4)
    g.add_edge(0, 2, geom(50))
    g.add_edge(1, 3, geom(50))
    assert g.jaccard_distance(0, 1) == 1.0


def test_jaccard_worked_example():
    # views i=0, j=1, a=2, b=3; M_ia=10, M_aj=10, M_ib=10, M_ij=0
    g = ViewGraph(min_correspondences=1)
    for _ in range(4):
        g.add_view(INTR)
    g.add_edge(0, 2, geom(10))
    g.add_edge(2, 1, geom(10))
    g.add_edge(0, 3, geom(10))
    assert g.jaccard_distance(0, 1) == pytest.approx(1.0 / 3.0)


def brute_force_jaccard(g, i, j):
    n_all = range(g.num_views)
    common = [n for n in n_all if g.match_count(i, n) * g.match_count(n, j) > 0]
    num = sum(g.match_count(i, n) + g.match_count(n, j) for n in common)
    den = sum(g.match_count(i, n) + g.match_count(n, j) for n in n_all)
    return 1.0 if den == 0 else 1.0 - num / den


def random_graph(rng, n=12, p=0.35):
    g = graph_with(n)
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                g.add_edge(i, j, geom(int(rng.integers(16, 200)), seed=int(rng.integers(1 << 30))))
    return g


def test_jaccard_matches_brute_force_and_is_symmetric():
    rng = np.random.default_rng(7)
    for _ in range(10):
        g = random_graph(rng)
        for i in range(g.num_views):
            for j in range(i + 1, g.num_views):
                d = g.jaccard_distance(i, j)
                assert d == pytest.approx(brute_force_jaccard(g, i, j))
                assert d == pytest.approx(g.jaccard_distance(j, i))
                assert 0.0 <= d <= 1.0


def test_adding_shared_neighbor_edge_never_increases_distance():
    rng = np.random.default_rng(11)
    for trial in range(20):
        g = random_graph(rng, n=10)
        pairs = [(i, j) for i in range(10) for j in range(i + 1, 10)]
        i, j = pairs[int(rng.integers(len(pairs)))]
        # give i and j a strong common neighbor
        k = int(rng.integers(10))
        if k in (i, j):
            continue
        before = g.jaccard_distance(i, j)
        big = 10000
        g.add_edge(i, k, geom(big, seed=trial))
        g.add_edge(k, j, geom(big, seed=trial + 1))
        after = g.jaccard_distance(i, j)
        assert after <= before + 1e-12


def test_match_matrix_reproducible_from_edges():
    rng = np.random.default_rng(13)
    g = random_graph(rng)
    M = np.zeros((g.num_views, g.num_views), dtype=int)
    for (i, j) in g.edges():
        M[i, j] = M[j, i] = g.geometry(i, j).inliers
    for i in range(g.num_views):
        assert M[i, i] == 0
        for j in range(g.num_views):
            assert M[i, j] == g.match_count(i, j)


def test_edges_with_changed_distance():
    g = graph_with(5)
    g.add_edge(0, 1, geom(50))
    g.add_edge(1, 2, geom(50))
    g.add_edge(2, 3, geom(50))
    v = g.add_view(INTR)  # view 5, no edges
    assert g.edges_with_changed_distance(v) == set()
    # connect the new view only to view 1: all edges at 1, plus (1, 5)
    g.add_edge(v, 1, geom(50))
    changed = g.edges_with_changed_distance(v)
    assert changed == {(0, 1), (1, 2), (1, 5)}


def test_edges_changed_oracle_on_random_graphs():
    # brute force: diff all pairwise distances before/after the insertion
    rng = np.random.default_rng(17)
    for trial in range(10):
        g = random_graph(rng, n=9)
        before = {
            (i, j): g.jaccard_distance(i, j) for (i, j) in g.edges()
        }
        v = g.add_view(INTR)
        for n in range(3):
            tgt = int(rng.integers(9))
            g.add_edge(v, tgt, geom(int(rng.integers(16, 100)), seed=trial * 10 + n))
        changed = g.edges_with_changed_distance(v)
        for (i, j), d_old in before.items():
            if g.jaccard_distance(i, j) != d_old:
                assert (i, j) in changed


def test_json_round_trip():
    rng = np.random.default_rng(23)
    g = random_graph(rng, n=8)
    data = g.to_json_dict()
    g2 = ViewGraph.from_json_dict(data)
    assert g2.num_views == g.num_views
    assert list(g2.edges()) == list(g.edges())
    for (i, j) in g.edges():
        assert np.allclose(g2.geometry(i, j).rotation, g.geometry(i, j).rotation, atol=1e-9)
        assert np.allclose(g2.geometry(i, j).direction, g.geometry(i, j).direction, atol=1e-9)
        assert g2.geometry(i, j).inliers == g.geometry(i, j).inliers


def test_extract_subgraph_components():
    g = graph_with(6)
    g.add_edge(0, 1, geom(50))
    g.add_edge(1, 2, geom(50))
    g.add_edge(3, 4, geom(50))
    sub = extract_subgraph(g, [0, 1, 2, 3, 4, 5])
    assert sub.connected_components() == [[0, 1, 2], [3, 4], [5]]
    sub2 = sub.without_edges({(1, 2)})
    assert sub2.connected_components() == [[0, 1], [2], [3, 4], [5]]
