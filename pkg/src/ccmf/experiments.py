"""Experiment drivers shared by the command line and the test suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import baselines, datasets
from .duality import check_weak_duality, ctv_energy, longest_axis_run, threshold_nu
from .graph import TransportGraph, build_incidence, from_edges, grid_graph
from .solver import DualState, FlowState, SolveReport, SolverConfig, preset, solve


@dataclass
class Segmentation:
    graph: TransportGraph
    flow: FlowState
    dual: DualState
    report: SolveReport
    mask: np.ndarray
    nu: np.ndarray
    lam: np.ndarray

    @property
    def energy(self) -> float:
        return 2.0 * float(self.dual.lam @ self.graph.g ** 2)


def segment_image(image, fg, bg, beta: float = 100.0, config: SolverConfig | None = None,
                  threshold: float = 0.5, g_floor: float = datasets.DEFAULT_G_FLOOR) -> Segmentation:
    """Seeded CCMF segmentation of a 2d or 3d image with contrast capacities.

    Returns per-pixel fields: seeds carry their terminal's ``nu`` (1 or 0)
    and ``lam``.  The solve report is returned as is; callers decide whether
    a non-converged run is an error.
    """
    image = np.asarray(image, dtype=float)
    g = datasets.contrast_metric(image, beta, floor=g_floor)
    graph = grid_graph(image.shape, g, fg, bg)
    flow, dual, report = solve(graph, config or preset("paper-practical"))
    nu = dual.nu[graph.pixel_nodes]
    lam = dual.lam[graph.pixel_nodes]
    mask = threshold_nu(nu, threshold)
    return Segmentation(graph, flow, dual, report, mask, nu, lam)


def compare_methods(image, fg, bg, beta: float = 100.0, config: SolverConfig | None = None,
                    truth=None, at_iters: int = 1000, threshold: float = 0.5,
                    g_floor: float = datasets.DEFAULT_G_FLOOR):
    """CCMF, graph cuts and AT-CMF on one image with shared seeds.

    Returns ``(rows, masks)``.  Each row holds the method's own objective
    (``energy``), the CTV of its mask on the CCMF graph, Dice against
    ``truth`` (NaN without truth), iterations, wall time and the longest
    straight boundary run (2d only).
    """
    image = np.asarray(image, dtype=float)
    rows, masks = [], {}

    t0 = time.perf_counter()
    seg = segment_image(image, fg, bg, beta, config, threshold, g_floor)
    masks["ccmf"] = seg.mask
    rows.append(("ccmf", seg.energy, seg.report.iterations, time.perf_counter() - t0))

    t0 = time.perf_counter()
    gc_value, gc_mask = baselines.graph_cut_segment(image, fg, bg, beta)
    masks["graph_cut"] = gc_mask
    rows.append(("graph_cut", gc_value, 1, time.perf_counter() - t0))

    t0 = time.perf_counter()
    at = baselines.at_cmf_solve(seg.graph, at_iters)
    masks["at_cmf"] = (at.pixels(seg.graph) >= threshold).astype(np.uint8)
    # AT-CMF has no energy of its own; report the flow through the source
    at_value = float(-(build_incidence(seg.graph).A.T @ at.F)[seg.graph.source])
    rows.append(("at_cmf", at_value, at_iters, time.perf_counter() - t0))

    out = []
    for name, energy, iters, wall in rows:
        mask = masks[name]
        u = np.zeros(seg.graph.n)
        u[seg.graph.pixel_nodes] = mask
        u[seg.graph.source], u[seg.graph.sink] = 1.0, 0.0
        out.append({
            "method": name,
            "energy": float(energy),
            "ctv": ctv_energy(seg.graph, u),
            "dice": datasets.dice(mask, truth) if truth is not None else float("nan"),
            "iterations": int(iters),
            "wall_time": wall,
            "max_axis_run": longest_axis_run(mask) if mask.ndim == 2 else -1,
        })
    return out, masks


def catenoid_experiment(N: int = 32, R: float = 10.0, h: float = 4.0,
                        config: SolverConfig | None = None, at_iters: int = 2000,
                        threshold: float = 0.5) -> dict:
    """Per-slice radii of the CCMF and AT-CMF surfaces against the analytic catenoid."""
    ph = datasets.catenoid_phantom(N, R, h)
    flow, dual, report = solve(ph.graph, config or preset("paper-practical"))
    nu = dual.nu[ph.graph.pixel_nodes]
    ccmf_mask = nu >= threshold
    at = baselines.at_cmf_solve(ph.graph, at_iters)
    at_mask = at.pixels(ph.graph) >= threshold
    z = ph.profile_slices()
    return {
        "phantom": ph,
        "report": report,
        "nu": nu,
        "z": z,
        "analytic": ph.analytic_radius(z),
        "ccmf_radius": datasets.slice_radii(ccmf_mask, z),
        "at_radius": datasets.slice_radii(at_mask, z),
        "ccmf_rmse": datasets.catenoid_rmse(ph, ccmf_mask),
        "at_rmse": datasets.catenoid_rmse(ph, at_mask),
    }


def karate_experiment(config: SolverConfig | None = None, threshold: float = 0.5) -> dict:
    graph, truth = datasets.zachary_graph()
    flow, dual, report = solve(graph, config or preset("strict"))
    labels = threshold_nu(dual.nu, threshold, sink=graph.sink)
    wrong = np.flatnonzero(labels != truth)
    return {"graph": graph, "truth": truth, "nu": dual.nu, "labels": labels,
            "misclassified": wrong, "report": report}


# --- randomized duality suites ---------------------------------------------------

def random_transport_graph(rng: np.random.Generator, n_min: int = 3, n_max: int = 12,
                           g_range=(0.1, 2.0), extra_edge_prob: float = 0.3) -> TransportGraph:
    """Random connected graph with source 0, sink n-1 and no direct s-t edge
    besides the st edge.  Capacities are uniform in ``g_range``."""
    n = int(rng.integers(max(n_min, 3), n_max + 1))
    s, t = 0, n - 1
    # spanning tree grown from a non-terminal root, never joining s and t directly
    root = int(rng.integers(1, n - 1))
    rest = [v for v in rng.permutation(n) if v != root]
    placed = [root]
    pairs = set()
    for u in map(int, rest):
        choices = [v for v in placed if {u, v} != {s, t}]
        v = choices[int(rng.integers(len(choices)))]
        pairs.add((min(u, v), max(u, v)))
        placed.append(u)
    for u in range(n):
        for v in range(u + 1, n):
            if {u, v} != {s, t} and rng.random() < extra_edge_prob:
                pairs.add((u, v))
    edges = [(u, v) if rng.random() < 0.5 else (v, u) for u, v in sorted(pairs)]
    return from_edges(n, edges, s, t, rng.uniform(*g_range, size=n))


def random_feasible_flow(graph: TransportGraph, rng: np.random.Generator) -> np.ndarray:
    """Random divergence-free flow scaled inside the node capacities."""
    op = build_incidence(graph)
    basis = scipy.linalg.null_space(op.A.T.toarray())
    if basis.shape[1] == 0:
        return np.zeros(graph.m)
    F = basis @ rng.standard_normal(basis.shape[1])
    load = op.absA.T @ (F * F) / graph.g ** 2
    return F * (rng.uniform(0.05, 1.0) / np.sqrt(load.max()))


def random_unit_gap_labelling(graph: TransportGraph, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(graph.n)
    u[graph.source] = u[graph.sink] + 1.0
    return u


def strong_duality_suite(count: int = 100, seed: int = 0, config: SolverConfig | None = None):
    """Solve ``count`` random instances; one dict per instance."""
    rng = np.random.default_rng(seed)
    cfg = config or preset("strict")
    rows = []
    for k in range(count):
        graph = random_transport_graph(rng)
        flow, dual, report = solve(graph, cfg)
        op = build_incidence(graph)
        dual_value = 2.0 * float(dual.lam @ graph.g ** 2)
        rows.append({
            "instance": k,
            "n": graph.n,
            "m": graph.m,
            "status": report.status,
            "iterations": report.iterations,
            "primal": flow.F_st,
            "dual": dual_value,
            "rel_gap": abs(flow.F_st - dual_value) / max(abs(flow.F_st), 1e-300),
            "divergence": float(np.linalg.norm(op.A.T @ flow.F)),
            "capacity_excess": float(np.max(op.absA.T @ (flow.F ** 2) - graph.g ** 2)),
        })
    return rows


def weak_duality_suite(count: int = 1000, seed: int = 0):
    """Check ``F^T A u <= CTV(u)`` on random feasible pairs; returns ``(lhs, rhs)`` arrays."""
    rng = np.random.default_rng(seed)
    lhs, rhs = np.empty(count), np.empty(count)
    for k in range(count):
        graph = random_transport_graph(rng)
        res = check_weak_duality(graph, random_feasible_flow(graph, rng),
                                 random_unit_gap_labelling(graph, rng))
        lhs[k], rhs[k] = res.lhs, res.rhs
    return lhs, rhs
