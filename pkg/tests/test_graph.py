import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmf.graph import (GraphError, TransportGraph, attach_unary_terms, build_incidence, divergence,
                        from_edges, grid_graph, lattice_graph, pointwise_flow_norm, read_graph,
                        source_sink_indicator, write_graph)


def test_single_edge_incidence():
    # the only edge of a 2-node graph is its st edge, here 0 -> 1 with sink 0
    G = TransportGraph(2, [(0, 1)], 1, 0, 0, [1.0, 1.0])
    assert build_incidence(G).A.toarray().tolist() == [[1.0, -1.0]]


def test_triangle_rows_and_columns(one_path):
    A = build_incidence(one_path).A.toarray()
    assert A.shape == (3, 3)
    assert np.all((A == 1).sum(axis=1) == 1) and np.all((A == -1).sum(axis=1) == 1)
    assert np.allclose(A.sum(axis=0), 0.0)


def test_grid_2x2_row_sums():
    fg = np.array([[True, False], [False, False]])
    bg = np.array([[False, False], [False, True]])
    G = grid_graph((2, 2), 1.0, fg, bg)
    op = build_incidence(G)
    assert op.A.shape[0] == G.m
    assert np.allclose(np.asarray(op.absA.sum(axis=1)).ravel(), 2.0)


def test_divergence_examples(one_path):
    G = TransportGraph(2, [(0, 1)], 1, 0, 0, [1.0, 1.0])
    assert divergence(build_incidence(G), [2.0]).tolist() == [2.0, -2.0]
    assert np.allclose(divergence(build_incidence(one_path), np.ones(3)), 0.0)


def test_divergence_dimension_mismatch(one_path):
    with pytest.raises(ValueError):
        divergence(build_incidence(one_path), np.ones(4))


def test_pointwise_norm_examples(one_path):
    op = build_incidence(one_path)
    assert np.allclose(pointwise_flow_norm(op, np.ones(3)), np.sqrt(2.0))
    assert np.allclose(pointwise_flow_norm(op, np.zeros(3)), 0.0)
    # node 1 of the path sees flows 3 and 4
    assert pointwise_flow_norm(op, np.array([3.0, 4.0, 0.0]))[1] == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10_000))
def test_divergence_sums_to_zero(n, seed):
    rng = np.random.default_rng(seed)
    edges = [(k, k + 1) for k in range(n - 1) if (k, k + 1) != (0, n - 1)]
    G = from_edges(n, edges, 0, n - 1, rng.uniform(0.1, 2, n))
    op = build_incidence(G)
    F = rng.standard_normal(G.m)
    assert abs(divergence(op, F).sum()) < 1e-12
    assert np.allclose(pointwise_flow_norm(op, F) ** 2, op.absA.T @ F ** 2, rtol=0, atol=1e-12)


def test_indicator_vectors(two_paths):
    ind = source_sink_indicator(two_paths)
    assert ind.c.sum() == 1 and ind.c[two_paths.st_edge] == 1
    assert ind.a.sum() == 0 and np.count_nonzero(ind.a) == 2
    assert ind.a[two_paths.source] == 1 and ind.a[two_paths.sink] == -1


@pytest.mark.parametrize("kwargs, msg", [
    (dict(g=[1.0, 0.0, 1.0]), "positive"),
    (dict(edges=[(0, 1), (1, 1), (2, 0)]), "self-loop"),
    (dict(edges=[(0, 1), (1, 0), (2, 0)]), "duplicate"),
    (dict(edges=[(0, 1), (1, 2), (0, 2)]), "sink -> source"),
])
def test_invariant_violations(kwargs, msg):
    base = dict(n=3, edges=[(0, 1), (1, 2), (2, 0)], source=0, sink=2, st_edge=2, g=[1.0, 1.0, 1.0])
    base.update(kwargs)
    with pytest.raises(GraphError, match=msg):
        TransportGraph(**base)


def test_disconnected_node_rejected():
    G = from_edges(4, [(0, 1), (1, 2)], 0, 2, np.ones(4))
    with pytest.raises(GraphError, match="components"):
        G.check_connected()


def test_grid_3x1_contraction():
    G = grid_graph((1, 3), 1.0, [[0, 0]], [[0, 2]])
    assert (G.n, G.m) == (3, 3)


def test_grid_3x3_center_and_corners():
    fg = np.zeros((3, 3), bool)
    fg[1, 1] = True
    bg = np.zeros((3, 3), bool)
    bg[[0, 0, 2, 2], [0, 2, 0, 2]] = True
    G = grid_graph((3, 3), 1.0, fg, bg)
    lattice = np.ones(G.m, bool)
    lattice[G.st_edge] = False
    e = G.edges[lattice]
    assert np.sum((e == G.source).any(axis=1)) == 4
    # each edge-midpoint pixel touches two corners; the merged pairs leave 4 edges
    assert np.sum((e == G.sink).any(axis=1)) == 4
    assert G.g[G.source] == G.g[G.sink] == pytest.approx(4.0)


def test_grid_seed_errors():
    fg = np.zeros((3, 3), bool)
    fg[0, 0] = True
    with pytest.raises(GraphError, match="overlap"):
        grid_graph((3, 3), 1.0, fg, fg)
    with pytest.raises(GraphError, match="non-empty"):
        grid_graph((3, 3), 1.0, fg, np.zeros((3, 3), bool))
    with pytest.raises(GraphError, match="outside"):
        grid_graph((3, 3), 1.0, [[0, 0]], [[5, 5]])


def test_grid_3d_degrees():
    fg = np.zeros((3, 3, 3), bool)
    fg[1, 1, 1] = True
    bg = np.zeros((3, 3, 3), bool)
    bg[0] = True
    G = grid_graph((3, 3, 3), 1.0, fg, bg)
    op = build_incidence(G)
    deg = np.bincount(G.edges.ravel(), minlength=G.n)
    assert np.array_equal(np.asarray(op.absA.sum(axis=0)).ravel(), deg)
    assert G.pixel_nodes.shape == (3, 3, 3)
    assert G.edge_axis[G.st_edge] == -1


def test_uncontracted_grid_keeps_every_pixel():
    fg = np.zeros((4, 4), bool)
    fg[1, 1] = True
    bg = np.zeros((4, 4), bool)
    bg[3] = True
    G = grid_graph((4, 4), 1.0, fg, bg, contract=False)
    assert G.n == 16 + 2
    G.check_connected()
    # one hanging edge per seed pixel
    hang = (G.edges == G.source).any(axis=1) | (G.edges == G.sink).any(axis=1)
    assert hang.sum() == 1 + 4 + 1


def test_unary_terms_counts():
    base = lattice_graph((1, 1), 1.0)
    assert (base.n, base.m) == (3, 1)
    G = attach_unary_terms(base, np.full(base.n, 2.0), np.full(base.n, 1.0))
    assert (G.n, G.m) == (5, 5)
    G.check_connected()


def test_unary_terms_reject_zero_prior():
    base = lattice_graph((2, 2), 1.0)
    fg = np.ones(base.n)
    fg[1] = 0.0
    with pytest.raises(GraphError):
        attach_unary_terms(base, fg, np.ones(base.n))


def test_unary_priors_decide_labels():
    from ccmf.duality import threshold_nu
    from ccmf.solver import preset, solve

    base = lattice_graph((2, 2), 1.0)
    for fg_val, bg_val, expect in ((5.0, 0.2, 1), (0.2, 5.0, 0)):
        G = attach_unary_terms(base, np.full(base.n, fg_val), np.full(base.n, bg_val))
        _, dual, report = solve(G, preset("strict"))
        assert report.success
        labels = threshold_nu(dual.nu, 0.5, sink=G.sink)[base.pixel_nodes]
        assert np.all(labels == expect)


def test_graph_text_round_trip(two_paths):
    buf = io.StringIO()
    write_graph(two_paths, buf)
    assert buf.getvalue().startswith("ccmf-graph 4 5 0 3 4\n")
    buf.seek(0)
    G = read_graph(buf)
    assert np.array_equal(G.edges, two_paths.edges)
    assert np.array_equal(G.g, two_paths.g)


def test_graph_text_errors():
    with pytest.raises(GraphError, match="header"):
        read_graph(io.StringIO("graph 1 2 3"))
    with pytest.raises(GraphError, match="expected"):
        read_graph(io.StringIO("ccmf-graph 3 3 0 2 2\n0 1\n1 2\n2 0\n1.0\n"))


def test_contraction_matches_uncontracted_solve():
    from ccmf import datasets
    from ccmf.duality import threshold_nu
    from ccmf.solver import preset, solve

    img, fg, bg, _ = datasets.two_region_phantom(30)
    g = datasets.contrast_metric(img, 100.0, datasets.DEFAULT_G_FLOOR)
    out = []
    for contract in (True, False):
        G = grid_graph(img.shape, g, fg, bg, contract=contract)
        flow, dual, _ = solve(G, preset("strict"))
        out.append((flow.F_st, threshold_nu(dual.nu, sink=G.sink)[G.pixel_nodes]))
    assert out[0][0] == pytest.approx(out[1][0], rel=1e-6)
    assert np.array_equal(out[0][1], out[1][1])
