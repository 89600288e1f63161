import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ccmf.duality import dual_energy, saturation_threshold
from ccmf.experiments import random_transport_graph
from ccmf.graph import build_incidence, from_edges, source_sink_indicator
from ccmf.solver import (ConvergenceError, NonInteriorError, SolverConfig, assemble_kkt,
                         constraint_values, line_search, newton_step, preset, residuals, solve)


def test_constraint_values_examples(one_path):
    assert np.allclose(constraint_values(one_path, np.zeros(3)), -1.0)
    G = from_edges(3, [(0, 1), (1, 2)], 0, 2, [6.0, 5.0, 6.0])
    assert constraint_values(G, [3.0, 4.0, 0.0])[1] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        constraint_values(one_path, np.zeros(2))


def test_residuals_at_start(one_path):
    t = 7.0
    r_d, r_c, r_p = residuals(one_path, np.zeros(3), np.ones(3), np.zeros(3), t)
    c = source_sink_indicator(one_path).c
    assert np.allclose(r_d, -c)
    assert np.allclose(r_p, 0.0)
    assert np.allclose(r_c, one_path.g ** 2 - 1.0 / t)


def test_residuals_reject_non_interior(one_path):
    with pytest.raises(NonInteriorError):
        residuals(one_path, np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros(3), 1.0)
    with pytest.raises(NonInteriorError):
        residuals(one_path, np.full(3, 1.0), np.ones(3), np.zeros(3), 1.0)


def test_kkt_layout_one_path(one_path):
    M, r = assemble_kkt(one_path, np.zeros(3), np.ones(3), np.zeros(3), 1.0)
    m, n = one_path.m, one_path.n
    assert M.shape == (m + 2 * n, m + 2 * n) and r.shape == (m + 2 * n,)
    D = M.toarray()
    assert np.allclose(D[:m, :m], 4.0 * np.eye(3))
    # gradients vanish at F = 0
    assert np.allclose(D[m:m + n, :m], 0.0)
    A = build_incidence(one_path).A.toarray()
    assert np.allclose(D[m + n:, :m], A.T)


def test_newton_zero_rhs(one_path):
    M, _ = assemble_kkt(one_path, np.zeros(3), np.ones(3), np.zeros(3), 1.0)
    assert np.all(newton_step(M, np.zeros(M.shape[0]), one_path.n, one_path.sink) == 0)


@pytest.mark.parametrize("method", ["saddle", "nodal"])
def test_newton_matches_dense_first_iteration(one_path, method):
    f0 = constraint_values(one_path, np.zeros(3))
    t = 10.0 * one_path.n / float(-f0 @ np.ones(3))
    M, r = assemble_kkt(one_path, np.zeros(3), np.ones(3), np.zeros(3), t)
    dy = newton_step(M, r, one_path.n, one_path.sink, method)
    ref = oracles.dense_kkt_solution(M, r, one_path.m + 2 * one_path.n - one_path.n + one_path.sink)
    assert np.linalg.norm(dy - ref) <= 1e-9 * np.linalg.norm(ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["saddle", "nodal"]))
def test_newton_matches_dense_random_interior(seed, method):
    rng = np.random.default_rng(seed)
    G = random_transport_graph(rng, n_max=8)
    m, n = G.m, G.n
    A = build_incidence(G)
    # random strictly interior point
    F = rng.standard_normal(m)
    F *= 0.9 / np.sqrt(np.max((A.absA.T @ F ** 2) / G.g ** 2))
    lam = rng.uniform(0.1, 2.0, n)
    nu = rng.standard_normal(n)
    M, r = assemble_kkt(G, F, lam, nu, float(rng.uniform(1, 100)))
    dy = newton_step(M, r, n, G.sink, method)
    ref = oracles.dense_kkt_solution(M, r, m + n + G.sink)
    assert np.linalg.norm(dy - ref) <= 1e-9 * max(np.linalg.norm(ref), 1.0)
    assert np.linalg.norm(M @ dy - r) <= 1e-9 * max(np.linalg.norm(r), 1.0)


def test_line_search_keeps_interior(one_path):
    cfg = preset("strict")
    F, lam, nu = np.zeros(3), np.ones(3), np.zeros(3)
    t = 10.0 * 3 / 3.0
    M, r = assemble_kkt(one_path, F, lam, nu, t)
    dy = newton_step(M, r, 3, one_path.sink)
    dF, dlam, dnu = dy[:3], dy[3:6], dy[6:]
    s = line_search(one_path, (F, lam, nu), (dF, dlam, dnu), t, cfg)
    assert 0 < s <= 1
    assert np.all(constraint_values(one_path, F + s * dF) < 0)
    assert np.all(lam + s * dlam > 0)
    assert line_search(one_path, (F, lam, nu), (0 * dF, 0 * dlam, 0 * dnu), t, cfg) == 1.0


def test_line_search_respects_ratio_bound():
    # near-saturated interior points make the Newton step push some lambda negative
    cfg = preset("strict")
    rng = np.random.default_rng(5)
    truncated = 0
    for _ in range(10):
        G = random_transport_graph(rng)
        m, n = G.m, G.n
        op = build_incidence(G)
        F = rng.standard_normal(m)
        F *= 0.99 / np.sqrt(np.max((op.absA.T @ F ** 2) / G.g ** 2))
        lam, nu = rng.uniform(0.1, 2.0, n), np.zeros(n)
        t = cfg.mu * n / float(-constraint_values(G, F) @ lam)
        M, r = assemble_kkt(G, F, lam, nu, t)
        dy = newton_step(M, r, n, G.sink)
        dF, dlam, dnu = dy[:m], dy[m:m + n], dy[m + n:]
        s = line_search(G, (F, lam, nu), (dF, dlam, dnu), t, cfg)
        neg = dlam < 0
        if np.any(neg):
            bound = 0.99 * np.min(-lam[neg] / dlam[neg])
            assert s <= min(1.0, bound) * (1 + 1e-12)
            truncated += bound < 1.0
        assert np.all(lam + s * dlam > 0)
        assert np.all(constraint_values(G, F + s * dF) < 0)
    assert truncated > 0


def _check_optimum(G, flow, dual, tol=1e-6):
    op = build_incidence(G)
    assert np.linalg.norm(op.A.T @ flow.F) <= tol
    assert np.max(op.absA.T @ flow.F ** 2 - G.g ** 2) <= tol
    assert flow.F_st == pytest.approx(2 * dual.lam @ G.g ** 2, rel=1e-4)


def test_one_path_optimum(one_path):
    flow, dual, report = solve(one_path, preset("strict"))
    assert report.success
    assert flow.F_st == pytest.approx(1 / math.sqrt(2), abs=1e-4)
    _check_optimum(one_path, flow, dual)
    assert report.history[-1].r_d <= 1e-6 and report.history[-1].gap <= 1e-6


def test_two_paths_optimum(two_paths):
    flow, dual, report = solve(two_paths, preset("strict"))
    assert report.success
    assert flow.F_st == pytest.approx(math.sqrt(2 / 3), abs=1e-4)
    _check_optimum(two_paths, flow, dual)


def test_saddle_and_nodal_agree(two_paths):
    a = solve(two_paths, preset("strict", kkt_method="saddle"))
    b = solve(two_paths, preset("strict", kkt_method="nodal"))
    assert a[0].F_st == pytest.approx(b[0].F_st, abs=1e-9)
    assert a[2].iterations == b[2].iterations


def test_dual_identities_at_optimum(two_paths):
    G = two_paths
    flow, dual, _ = solve(G, preset("strict"))
    op = build_incidence(G)
    c = source_sink_indicator(G).c
    lam, nu = dual.lam, dual.nu
    # stationarity
    den = op.absA @ lam
    ok = den > 1e-6
    assert np.allclose(flow.F[ok], ((c + op.A @ nu) / (2 * den))[ok], atol=1e-3)
    # saturation identity on strongly active nodes
    active = lam > saturation_threshold(lam)
    lhs = lam * (op.absA.T @ (((c + op.A @ nu) / np.maximum(den, 1e-12)) ** 2))
    assert np.allclose(lhs[active], 4 * (lam * G.g ** 2)[active], rtol=1e-3)
    # dual energy equals primal value
    assert dual_energy(G, lam, nu) == pytest.approx(flow.F_st, rel=1e-3)
    # saturated terminals let the st edge carry part of the potential jump
    assert nu[G.sink] == 0 and 0 < nu[G.source] <= 1 + 1e-6


def test_interiority_along_path(two_paths, tmp_path):
    trace = tmp_path / "trace.csv"
    _, _, report = solve(two_paths, preset("strict", trace_path=str(trace)))
    assert all(rec.gap > 0 for rec in report.history)
    lines = trace.read_text().splitlines()
    assert lines[0] == "iter,r_d,r_p,gap,step"
    assert len(lines) == len(report.history) + 1


@pytest.mark.parametrize("n_edges", [2, 3, 4])
def test_brute_force_oracle_small_graphs(n_edges):
    rng = np.random.default_rng(n_edges)
    for _ in range(4):
        while True:
            G = random_transport_graph(rng, n_min=3, n_max=4, extra_edge_prob=0.6)
            if G.m - 1 == n_edges:
                break
        flow, _, report = solve(G, preset("strict"))
        assert report.success
        ref = oracles.brute_force_ccmf(G.n, [tuple(e) for e in G.edges], G.st_edge, G.g)
        assert flow.F_st == pytest.approx(ref, abs=1e-3)


def test_max_iters_returns_best_iterate(two_paths):
    flow, dual, report = solve(two_paths, preset("strict", max_iters=2))
    assert report.status == "max_iters" and not report.success
    assert report.iterations == 2
    assert np.all(np.isfinite(flow.F))
    with pytest.raises(ConvergenceError):
        report.raise_for_status()


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(mu=1.0)
    with pytest.raises(ValueError):
        SolverConfig(ls_alpha=0.5)
    with pytest.raises(ValueError):
        SolverConfig(ls_beta=1.0)
    with pytest.raises(ValueError):
        preset("fast")
    assert preset("paper-practical").eps_feas == 1.0
    assert preset("paper-practical").eps_gap == 2.0
    assert preset("strict", mu=None).mu == 10.0
