"""Primal-dual interior-point solver for node-capacitated continuous max-flow.

Problem::

    max  c^T F   s.t.  A^T F = 0,   |A^T| F^2 <= g^2

Each node constraint ``f_i(F) = |A^T|_i F^2 - g_i^2`` is a convex quadratic.
The solver follows the usual primal-dual scheme: compute the surrogate gap
``eta = -f(F)^T lam``, set ``t = mu * n / eta``, take a Newton step on the
perturbed KKT conditions and backtrack.

Sign conventions: the multipliers satisfy the stationarity condition
``c + A nu = 2 (|A| lam) * F``, so a converged flow is
``F = (c + A nu) / (2 |A| lam)``, ``c^T F = 2 lam^T g^2``, and ``nu`` is high on
the source side and low on the sink side.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .graph import IncidenceOperator, TransportGraph, build_incidence, source_sink_indicator

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class NonInteriorError(SolverError):
    """The point handed to a KKT routine is not strictly feasible."""


class SingularSystemError(SolverError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, report):
        super().__init__(f"solver did not converge: {report.status} after {report.iterations} iterations")
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    mu: float = 10.0
    eps_feas: float = 1e-6
    eps_gap: float = 1e-6
    max_iters: int = 200
    ls_alpha: float = 0.01
    ls_beta: float = 0.5
    init_lambda: float = 1.0
    trace_path: str | None = None
    kkt_method: str = "nodal"

    def __post_init__(self):
        if not self.mu > 1:
            raise ValueError("mu must exceed 1")
        if not 0 < self.ls_alpha < 0.5:
            raise ValueError("ls_alpha must lie in (0, 0.5)")
        if not 0 < self.ls_beta < 1:
            raise ValueError("ls_beta must lie in (0, 1)")
        if self.eps_feas <= 0 or self.eps_gap <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or self.init_lambda <= 0:
            raise ValueError("max_iters and init_lambda must be positive")


PRESETS = {
    "strict": SolverConfig(),
    # stopping rule reported for image experiments: ||r_d|| < 1 and gap < 2
    "paper-practical": SolverConfig(eps_feas=1.0, eps_gap=2.0),
}


def preset(name: str, **overrides) -> SolverConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **overrides)


@dataclass
class FlowState:
    F: np.ndarray
    F_st: float


@dataclass
class DualState:
    lam: np.ndarray
    nu: np.ndarray


@dataclass
class IterationRecord:
    iteration: int
    r_d: float
    r_p: float
    gap: float
    step: float


@dataclass
class SolveReport:
    iterations: int = 0
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "running"

    @property
    def success(self) -> bool:
        return self.status == "converged"

    def raise_for_status(self):
        if not self.success:
            raise ConvergenceError(self)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "r_d", "r_p", "gap", "step"])
            for rec in self.history:
                w.writerow([rec.iteration, f"{rec.r_d:.12g}", f"{rec.r_p:.12g}",
                            f"{rec.gap:.12g}", f"{rec.step:.12g}"])


class _Problem:
    """Cached operators for one graph."""

    def __init__(self, graph: TransportGraph):
        self.graph = graph
        self.op: IncidenceOperator = build_incidence(graph)
        self.A = self.op.A
        self.absA = self.op.absA
        self.AT = self.A.T.tocsr()
        self.absAT = self.absA.T.tocsr()
        self.c = source_sink_indicator(graph).c
        self.g2 = graph.g ** 2
        self.m, self.n = graph.m, graph.n


def _problem(graph) -> _Problem:
    return graph if isinstance(graph, _Problem) else _Problem(graph)


def constraint_values(graph, F) -> np.ndarray:
    """``f(F) = |A^T| F^2 - g^2``; negative entries are strictly feasible."""
    p = _problem(graph)
    F = np.asarray(F, dtype=float)
    if F.shape != (p.m,):
        raise ValueError(f"flow vector has shape {F.shape}, expected ({p.m},)")
    return p.absAT @ (F * F) - p.g2


def _check_interior(lam, f):
    if np.any(lam <= 0):
        raise NonInteriorError("lambda must be strictly positive")
    if np.any(f >= 0):
        raise NonInteriorError("flow violates or saturates a node capacity")


def _residuals(p: _Problem, F, lam, nu, t, f):
    r_d = 2.0 * F * (p.absA @ lam) - p.c - p.A @ nu
    r_c = -lam * f - 1.0 / t
    r_p = p.AT @ F
    return r_d, r_c, r_p


def residuals(graph, F, lam, nu, t_barrier):
    """Dual, centrality and primal residuals of the perturbed KKT system.

    ``r_d = Df(F)^T lam - c - A nu`` with ``grad f_i = 2 |A^T|_i * F``,
    ``r_c = -lam * f(F) - 1/t`` and ``r_p = A^T F``.
    """
    p = _problem(graph)
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if t_barrier <= 0:
        raise ValueError("barrier parameter must be positive")
    f = constraint_values(p, F)
    _check_interior(lam, f)
    return _residuals(p, np.asarray(F, float), lam, nu, t_barrier, f)


def assemble_kkt(graph, F, lam, nu, t_barrier):
    """Newton matrix ``M`` (size m+2n) and right-hand side ``r = -[r_d; r_c; r_p]``.

    Block layout::

        [ 2 diag(|A| lam)     Df^T       -A ]
        [ -diag(lam) Df   -diag(f)        0 ]
        [ A^T                  0          0 ]
    """
    p = _problem(graph)
    F = np.asarray(F, dtype=float)
    lam = np.asarray(lam, dtype=float)
    r_d, r_c, r_p = residuals(p, F, lam, nu, t_barrier)
    f = constraint_values(p, F)
    Df = 2.0 * p.absAT @ sps.diags(F)
    H = sps.diags(2.0 * (p.absA @ lam))
    M = sps.bmat([
        [H, Df.T, -p.A],
        [-sps.diags(lam) @ Df, sps.diags(-f), None],
        [p.AT, None, None],
    ], format="csr")
    r = -np.concatenate([r_d, r_c, r_p])
    return M, r


try:
    import pymetis
except ImportError:  # pragma: no cover - optional speed-up
    pymetis = None

# below this size the ordering choice hardly matters
_ND_MIN_SIZE = 2000


def _fill_reducing_order(K):
    """Nested-dissection permutation of a structurally symmetric matrix, or None."""
    if pymetis is None or K.shape[0] < _ND_MIN_SIZE:
        return None
    S = sps.csr_matrix(abs(K) + abs(K).T)
    S.setdiag(0)
    S.eliminate_zeros()
    S.sort_indices()
    perm, _ = pymetis.nested_dissection(pymetis.CSRAdjacency(S.indptr, S.indices))
    return np.asarray(perm, dtype=np.int64)


def _factor_solve(K, rhs, reg_diag, symmetric: bool = False):
    """LU-solve ``K x = rhs`` with one regularised retry and one refinement step.

    ``symmetric=True`` promises a symmetric positive definite ``K``: pivots
    stay on the diagonal and a nested-dissection ordering is used when
    available, which keeps the fill low on 3d lattices.
    """
    perm = _fill_reducing_order(K) if symmetric else None

    def attempt(mat):
        with np.errstate(all="ignore"):
            if perm is not None:
                lu = spla.splu(mat[perm][:, perm].tocsc(), permc_spec="NATURAL",
                               diag_pivot_thresh=0.0, options={"SymmetricMode": True})
            elif symmetric:
                lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A",
                               diag_pivot_thresh=0.0, options={"SymmetricMode": True})
            else:
                lu = spla.splu(mat.tocsc(), permc_spec="COLAMD")
            solver = lu.solve
            if perm is not None:
                def solver(b, _lu=lu):
                    out = np.empty_like(b)
                    out[perm] = _lu.solve(b[perm])
                    return out
            x = solver(rhs)
        if not np.all(np.isfinite(x)):
            raise RuntimeError("non-finite solution")
        return solver, x

    try:
        solver, x = attempt(K)
    except RuntimeError:
        try:
            solver, x = attempt(K + sps.diags(reg_diag))
        except RuntimeError as exc:
            raise SingularSystemError(f"reduced KKT system is singular: {exc}") from exc
    res = rhs - K @ x
    if np.linalg.norm(res) > 1e-12 * max(np.linalg.norm(rhs), 1.0):
        x = x + solver(res)
    return x


def newton_step(M, r, n: int, gauge: int, method: str = "saddle", reg: float = 1e-10) -> np.ndarray:
    """Solve ``M dy = r`` by block elimination.

    ``method="saddle"`` eliminates ``dlam`` through the diagonal ``-diag(f)``
    block (invertible in the interior) and factorises the saddle system in
    ``(dF, dnu)``.  ``method="nodal"`` instead eliminates ``dF`` through the
    diagonal Hessian block, leaving a 2n x 2n system in ``(dlam, dnu)``; it is
    much cheaper on 3d lattices where there are three edges per node.

    ``dnu[gauge]`` is pinned to zero: ``nu`` is only defined up to a
    constant, and the matching divergence row is redundant.
    """
    M = sps.csr_matrix(M)
    r = np.asarray(r, dtype=float)
    N = M.shape[0]
    m = N - 2 * n
    if m <= 0 or M.shape != (N, N) or r.shape != (N,):
        raise ValueError("inconsistent KKT dimensions")
    if not np.any(r):
        return np.zeros(N)

    M11 = M[:m, :m]
    M12 = M[:m, m:m + n]
    M13 = M[:m, m + n:]
    M21 = M[m:m + n, :m]
    d22 = M[m:m + n, m:m + n].diagonal()
    M31 = M[m + n:, :m]
    r1, r2, r3 = r[:m], r[m:m + n], r[m + n:]
    keep = np.ones(n, dtype=bool)
    keep[gauge] = False
    dnu = np.zeros(n)

    if method == "saddle":
        if np.any(d22 == 0):
            raise SingularSystemError("multiplier block is singular (point not interior)")
        K11 = M11 - M12 @ sps.diags(1.0 / d22) @ M21
        K = sps.bmat([[K11, M13[:, keep]], [M31[keep], None]])
        rhs = np.concatenate([r1 - M12 @ (r2 / d22), r3[keep]])
        sol = _factor_solve(K, rhs, np.concatenate([np.full(m, reg), np.full(n - 1, -reg)]))
        dF = sol[:m]
        dnu[keep] = sol[m:]
        dlam = (r2 - M21 @ dF) / d22
    elif method == "nodal":
        h = M11.diagonal()
        if np.any(h == 0) or M11.nnz > np.count_nonzero(h):
            raise SingularSystemError("Hessian block must be diagonal and nonsingular")
        Hi = sps.diags(1.0 / h)
        M13k = M13[:, keep]
        # the multiplier rows are lam_i times the matching columns of M12;
        # dividing them out makes the reduced system symmetric positive definite
        col2 = np.asarray(M12.multiply(M12).sum(axis=0)).ravel()
        cross = np.asarray(M21.multiply(M12.T).sum(axis=1)).ravel()
        lam = np.ones(n)
        has = col2 > 0
        lam[has] = -cross[has] / col2[has]
        if np.any(lam <= 0):
            raise SingularSystemError("multiplier rows do not match a positive lambda")
        W = sps.diags(1.0 / lam)
        K = sps.bmat([
            [W @ (sps.diags(d22) - M21 @ Hi @ M12), -(W @ M21 @ Hi @ M13k)],
            [-(M31[keep] @ Hi @ M12), -(M31[keep] @ Hi @ M13k)],
        ]).tocsr()
        K = (K + K.T) * 0.5
        rhs = np.concatenate([(r2 - M21 @ (r1 / h)) / lam, r3[keep] - M31[keep] @ (r1 / h)])
        sol = _factor_solve(K, rhs, np.full(2 * n - 1, reg), symmetric=True)
        dlam = sol[:n]
        dnu[keep] = sol[n:]
        dF = (r1 - M12 @ dlam - M13 @ dnu) / h
    else:
        raise ValueError(f"unknown elimination method {method!r}")
    return np.concatenate([dF, dlam, dnu])


def _split(p, dy):
    m, n = p.m, p.n
    return dy[:m], dy[m:m + n], dy[m + n:]


def line_search(graph, y, dy, t_barrier, config: SolverConfig) -> float:
    """Backtracking step length keeping ``lam > 0``, ``f(F) < 0`` and an Armijo
    decrease of the stacked residual norm at fixed ``t``."""
    p = _problem(graph)
    F, lam, nu = y
    dF, dlam, dnu = dy
    if not (np.any(dF) or np.any(dlam) or np.any(dnu)):
        return 1.0
    neg = dlam < 0
    s = 1.0
    if np.any(neg):
        s = min(1.0, 0.99 * float(np.min(-lam[neg] / dlam[neg])))
    beta, alpha = config.ls_beta, config.ls_alpha

    while np.any(constraint_values(p, F + s * dF) >= 0):
        s *= beta
        if s < 1e-12:
            raise SolverError("line search stalled while restoring feasibility")

    r0 = np.linalg.norm(np.concatenate(_residuals(p, F, lam, nu, t_barrier, constraint_values(p, F))))
    while True:
        Fs, ls, ns = F + s * dF, lam + s * dlam, nu + s * dnu
        fs = constraint_values(p, Fs)
        rs = np.linalg.norm(np.concatenate(_residuals(p, Fs, ls, ns, t_barrier, fs)))
        if rs <= (1.0 - alpha * s) * r0:
            return s
        s *= beta
        if s < 1e-12:
            raise SolverError("line search stalled")


def _merit(rd, rp, gap, cfg):
    return max(rd / cfg.eps_feas, rp / cfg.eps_feas, gap / cfg.eps_gap)


def solve(graph: TransportGraph, config: SolverConfig | None = None):
    """Run the interior-point iteration from ``F = 0``, ``lam = init_lambda``, ``nu = 0``.

    Returns ``(FlowState, DualState, SolveReport)``.  When the iteration cap is
    hit or the line search stalls, the best iterate seen is returned and
    ``report.success`` is False.
    """
    cfg = config or SolverConfig()
    graph.check_connected()
    p = _Problem(graph)
    m, n = p.m, p.n
    F = np.zeros(m)
    lam = np.full(n, float(cfg.init_lambda))
    nu = np.zeros(n)
    report = SolveReport()
    t0 = time.perf_counter()
    best = None

    for it in range(cfg.max_iters + 1):
        f = constraint_values(p, F)
        gap = float(-f @ lam)
        t = cfg.mu * n / gap
        r_d, r_c, r_p = _residuals(p, F, lam, nu, t, f)
        nrd, nrp = float(np.linalg.norm(r_d)), float(np.linalg.norm(r_p))
        merit = _merit(nrd, nrp, gap, cfg)
        if best is None or merit < best[0]:
            best = (merit, F.copy(), lam.copy(), nu.copy())
        converged = nrp <= cfg.eps_feas and nrd <= cfg.eps_feas and gap <= cfg.eps_gap
        if converged:
            report.history.append(IterationRecord(it, nrd, nrp, gap, 0.0))
            report.status = "converged"
            break
        if it == cfg.max_iters:
            report.history.append(IterationRecord(it, nrd, nrp, gap, 0.0))
            report.status = "max_iters"
            break

        M, r = assemble_kkt(p, F, lam, nu, t)
        try:
            dy = newton_step(M, r, n, graph.sink, cfg.kkt_method)
            dF, dlam, dnu = _split(p, dy)
            s = line_search(p, (F, lam, nu), (dF, dlam, dnu), t, cfg)
        except SolverError as exc:
            log.warning("iteration %d: %s", it, exc)
            report.history.append(IterationRecord(it, nrd, nrp, gap, 0.0))
            report.status = "stalled"
            break
        report.history.append(IterationRecord(it, nrd, nrp, gap, s))
        log.debug("it %3d  |r_d| %.3e  |r_p| %.3e  gap %.3e  step %.3f", it, nrd, nrp, gap, s)
        F = F + s * dF
        lam = lam + s * dlam
        nu = nu + s * dnu
        report.iterations = it + 1

    if report.status != "converged":
        _, F, lam, nu = best
    nu = nu - nu[graph.sink]
    report.wall_time = time.perf_counter() - t0
    if cfg.trace_path:
        report.write_trace(cfg.trace_path)
    return FlowState(F, float(F[graph.st_edge])), DualState(lam, nu), report
