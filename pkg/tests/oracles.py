"""Independent reference computations used by the tests.

None of these share code with the solver: they work on dense matrices and
brute-force search.
"""
import itertools

import numpy as np
import scipy.linalg


def incidence_dense(n, edges):
    A = np.zeros((len(edges), n))
    for k, (u, v) in enumerate(edges):
        A[k, u] = 1.0
        A[k, v] = -1.0
    return A


def brute_force_ccmf(n, edges, st_edge, g, samples=4000, rounds=6, seed=0):
    """Max of F_st over divergence-free flows with |A^T| F^2 <= g^2.

    Every flow is ``N z`` with ``N`` a basis of the cycle space.  For a
    direction ``z`` the largest feasible multiple is
    ``min_i g_i / sqrt((|A^T| (N z)^2)_i)``; the best direction is found by
    random sampling on the sphere followed by shrinking local searches.
    """
    A = incidence_dense(n, edges)
    N = scipy.linalg.null_space(A.T)
    absAT = np.abs(A).T
    g = np.asarray(g, dtype=float)
    rng = np.random.default_rng(seed)

    def value(Z):
        F = Z @ N.T
        load = (F * F) @ absAT.T
        with np.errstate(divide="ignore"):
            alpha = np.min(g / np.sqrt(load), axis=1)
        return alpha * F[:, st_edge]

    d = N.shape[1]
    Z = rng.standard_normal((samples, d))
    vals = value(Z)
    best = Z[np.argmax(vals)]
    best_val = vals.max()
    radius = 0.5
    for _ in range(rounds * 10):
        cand = best + radius * rng.standard_normal((samples // 4, d))
        v = value(cand)
        k = np.argmax(v)
        if v[k] > best_val:
            best, best_val = cand[k], v[k]
        else:
            radius *= 0.7
    return float(best_val)


def exhaustive_min_cut(n, edges, capacity, source, sink, skip_edge=None):
    """Minimum over all source/sink partitions of the total capacity of cut edges."""
    free = [v for v in range(n) if v not in (source, sink)]
    best = np.inf
    for bits in itertools.product((0, 1), repeat=len(free)):
        side = np.zeros(n, dtype=int)
        side[source] = 1
        side[free] = bits
        cost = sum(c for k, ((u, v), c) in enumerate(zip(edges, capacity))
                   if k != skip_edge and side[u] != side[v])
        best = min(best, cost)
    return float(best)


def dense_kkt_solution(M, r, gauge_column):
    """Least-squares solution of the dense system with one nu column removed."""
    M = np.asarray(M.toarray() if hasattr(M, "toarray") else M, dtype=float)
    keep = np.ones(M.shape[1], dtype=bool)
    keep[gauge_column] = False
    sol, *_ = np.linalg.lstsq(M[:, keep], r, rcond=None)
    out = np.zeros(M.shape[1])
    out[keep] = sol
    return out
