"""Dual energy, cut interpretation and combinatorial total variation.

The dual of the node-capacitated max-flow is a node-weighted cut::

    min_{lam >= 0, nu}  lam^T g^2 + 1/4 * sum_e (c + A nu)_e^2 / (|A| lam)_e

``lam`` is positive on saturated nodes (the cut locus) and ``nu`` is a
near-binary potential, one on the source side and zero on the sink side.
"""
from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np

from .graph import TransportGraph, build_incidence, source_sink_indicator

DIV_FLOOR = 1e-12


def _non_st(graph: TransportGraph) -> np.ndarray:
    keep = np.ones(graph.m, dtype=bool)
    keep[graph.st_edge] = False
    return keep


def dual_energy(graph: TransportGraph, lam, nu) -> float:
    """Weighted cut + smoothness + source/sink enforcement terms."""
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    if not np.any(lam > 0):
        raise ValueError("lambda vanishes everywhere; every smoothness term divides by zero")
    op = build_incidence(graph)
    c = source_sink_indicator(graph).c
    num = (c + op.A @ nu) ** 2
    den = np.maximum(op.absA @ lam, DIV_FLOOR)
    return float(lam @ graph.g ** 2 + 0.25 * np.sum(num / den))


def dual_energy_terms(graph: TransportGraph, lam, nu) -> dict:
    """The three labelled terms of :func:`dual_energy` in summation form."""
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    e = graph.edges[_non_st(graph)]
    i, j = e[:, 0], e[:, 1]
    s, t = graph.source, graph.sink
    return {
        "weighted_cut": float(lam @ graph.g ** 2),
        "smoothness": float(0.25 * np.sum((nu[i] - nu[j]) ** 2 / np.maximum(lam[i] + lam[j], DIV_FLOOR))),
        "enforcement": float(0.25 * (nu[s] - nu[t] - 1.0) ** 2 / max(lam[s] + lam[t], DIV_FLOOR)),
    }


def saturated_nodes(graph: TransportGraph, F, tol: float = 1e-6) -> np.ndarray:
    """Ids of nodes whose incident-flow norm reaches the capacity (relative ``tol``)."""
    op = build_incidence(graph)
    F = np.asarray(F, dtype=float)
    g2 = graph.g ** 2
    slack = g2 - op.absA.T @ (F * F)
    return np.flatnonzero(slack <= tol * g2)


def saturation_threshold(lam) -> float:
    return 1e-6 * float(np.max(lam))


def threshold_nu(nu, theta: float = 0.5, sink: int | None = None) -> np.ndarray:
    """Binary labelling ``nu - nu[sink] >= theta`` (1 = source side)."""
    nu = np.asarray(nu, dtype=float)
    if sink is not None:
        nu = nu - nu[sink]
    return (nu >= theta).astype(np.uint8)


def ctv_node_terms(graph: TransportGraph, u) -> np.ndarray:
    """Per-node ``g_i * sqrt(sum over incident edges (u_i - u_j)^2)``, st edge excluded."""
    u = np.asarray(u, dtype=float)
    if u.shape != (graph.n,):
        raise ValueError(f"labelling has shape {u.shape}, expected ({graph.n},)")
    op = build_incidence(graph)
    keep = _non_st(graph).astype(float)
    du2 = (op.A @ u) ** 2 * keep
    return graph.g * np.sqrt(op.absA.T @ du2)


def ctv_energy(graph: TransportGraph, u) -> float:
    """Combinatorial total variation ``g^T sqrt(|A^T| (A u)^2)`` of a node labelling."""
    return float(np.sum(ctv_node_terms(graph, u)))


def min_binary_ctv(graph: TransportGraph, max_free: int = 20):
    """Exhaustive minimum of CTV over binary labellings with ``u_s = 1``, ``u_t = 0``."""
    free = graph.non_terminal_nodes()
    if free.size > max_free:
        raise ValueError(f"{free.size} free nodes exceeds exhaustive limit {max_free}")
    best, best_u = np.inf, None
    u = np.zeros(graph.n)
    u[graph.source] = 1.0
    for bits in itertools.product((0.0, 1.0), repeat=free.size):
        u[free] = bits
        val = ctv_energy(graph, u)
        if val < best:
            best, best_u = val, u.copy()
    return best, best_u


class WeakDuality(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def check_weak_duality(graph: TransportGraph, F, u, feas_tol: float = 1e-6,
                       slack: float = 1e-9) -> WeakDuality:
    """Check ``F^T A u <= g^T sqrt(|A^T| (A u)^2)`` on the graph without the st edge.

    For a divergence-free flow and ``u_s - u_t = 1`` the left side equals the
    flow value ``F_st``, so this is the bound ``F_st <= CTV(u)``.
    """
    F = np.asarray(F, dtype=float)
    u = np.asarray(u, dtype=float)
    op = build_incidence(graph)
    if F.shape != (graph.m,) or u.shape != (graph.n,):
        raise ValueError("dimension mismatch")
    a = source_sink_indicator(graph).a
    if abs(a @ u - 1.0) > 1e-9:
        raise ValueError("labelling must satisfy u_s - u_t = 1")
    g2 = graph.g ** 2
    if np.any(op.absA.T @ (F * F) - g2 > feas_tol * np.maximum(g2, 1.0)):
        raise ValueError("flow violates the node capacities")
    if np.linalg.norm(op.A.T @ F) > feas_tol * max(1.0, np.abs(F).max()):
        raise ValueError("flow is not divergence-free")
    keep = _non_st(graph)
    Au = (op.A @ u)[keep]
    lhs = float(F[keep] @ Au)
    rhs = ctv_energy(graph, u)
    return WeakDuality(lhs, rhs, lhs <= rhs + slack)


def longest_axis_run(mask) -> int:
    """Longest straight axis-aligned piece of the label boundary of a 2d mask.

    Counts consecutive unit boundary segments that lie on one lattice line and
    separate the same pair of labels.  A digital 45 degree line scores 1.
    """
    mask = np.asarray(mask).astype(np.int8)
    if mask.ndim != 2:
        raise ValueError("mask must be 2d")
    best = 0
    # horizontal boundary pieces sit between rows y and y+1; vertical ones between columns
    for diff in (np.diff(mask, axis=0), np.diff(mask, axis=1).T):
        for line in diff:
            run, prev = 0, 0
            for v in line:
                run = run + 1 if (v != 0 and v == prev) else (1 if v != 0 else 0)
                prev = v
                best = max(best, run)
    return best
