"""Node metrics, synthetic phantoms, the karate-club network and evaluation helpers."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .graph import GraphError, TransportGraph, from_edges, grid_graph

# max h/R for which R = c cosh(h/c) has a solution
CATENOID_CRITICAL_RATIO = 0.6627434193
DEFAULT_G_FLOOR = 1e-3


def contrast_metric(image, beta: float, floor: float = 0.0) -> np.ndarray:
    """Node capacities ``exp(-beta * |grad I|)``.

    The gradient uses central differences inside and one-sided differences on
    the border.  ``floor`` clamps tiny capacities from below; with ``beta``
    around 100 a unit step otherwise gives capacities near 1e-22, whose
    squares are lost against the unit-scale flow terms.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    img = np.asarray(image, dtype=float)
    sq = np.zeros_like(img)
    for k in range(img.ndim):
        if img.shape[k] > 1:
            sq += np.gradient(img, axis=k) ** 2
    return np.maximum(np.exp(-beta * np.sqrt(sq)), floor)


def appearance_priors(image, fg_color: float, bg_color: float, beta: float):
    """Per-pixel ``(fg_prior, bg_prior)`` = ``exp(-beta (colour - I)^2)`` for both classes."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    img = np.asarray(image, dtype=float)
    tiny = np.finfo(float).tiny
    fg = np.maximum(np.exp(-beta * (fg_color - img) ** 2), tiny)
    bg = np.maximum(np.exp(-beta * (bg_color - img) ** 2), tiny)
    return fg, bg


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


# --- synthetic images -----------------------------------------------------------

def _border(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for k in range(len(shape)):
        idx = [slice(None)] * len(shape)
        idx[k] = 0
        m[tuple(idx)] = True
        idx[k] = -1
        m[tuple(idx)] = True
    return m


def _disc(shape, center, radius) -> np.ndarray:
    yy, xx = np.indices(shape)
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def two_region_phantom(size: int = 100, low: float = 0.1, high: float = 0.9):
    """Bright centred disc on a dark background, no noise.

    Returns ``(image, fg_seeds, bg_seeds, truth)``; foreground seeds are a
    small disc at the centre and background seeds the image border.
    """
    shape = (size, size)
    c = (size - 1) / 2.0
    truth = _disc(shape, (c, c), size * 0.3)
    image = np.where(truth, high, low)
    return image, _disc(shape, (c, c), size * 0.08), _border(shape), truth


def synthetic_segmentation(seed: int, size: int = 100, noise: float = 0.05):
    """Random bright ellipse on a dark background with Gaussian noise.

    Returns ``(image, fg_seeds, bg_seeds, truth)``.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    shape = (size, size)
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    ry, rx = rng.uniform(0.15, 0.3, 2) * size
    theta = rng.uniform(0, np.pi)
    yy, xx = np.indices(shape)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    truth = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    lo, hi = rng.uniform(0.05, 0.3), rng.uniform(0.7, 0.95)
    image = np.clip(np.where(truth, hi, lo) + noise * rng.standard_normal(shape), 0.0, 1.0)
    fg = (u / rx) ** 2 + (v / ry) ** 2 <= 0.25 ** 2
    return image, fg, _border(shape), truth


def diagonal_line_phantom(size: int = 64, contrast: float = 0.2, width: float = 1.0):
    """Faint anti-diagonal line between two seed discs.

    Both sides of the line share one intensity, so the only cue is the thin
    line itself.  Returns ``(image, fg_seeds, bg_seeds, truth)`` where the
    truth is the half plane on the foreground side of the line.
    """
    shape = (size, size)
    yy, xx = np.indices(shape)
    d = (yy + xx - (size - 1)) / math.sqrt(2.0)
    image = 0.5 + contrast * np.exp(-0.5 * (d / width) ** 2)
    r = size * 0.12
    fg = _disc(shape, (size * 0.25, size * 0.25), r)
    bg = _disc(shape, (size * 0.75, size * 0.75), r)
    return image, fg, bg, d < 0


# --- catenoid --------------------------------------------------------------------

@dataclass(frozen=True)
class CatenoidPhantom:
    graph: TransportGraph
    fg: np.ndarray
    bg: np.ndarray
    c: float
    z_center: int
    z_rings: tuple[int, int]
    center: float

    def analytic_radius(self, z) -> np.ndarray:
        return self.c * np.cosh((np.asarray(z, dtype=float) - self.z_center) / self.c)

    def profile_slices(self) -> np.ndarray:
        return np.arange(self.z_rings[0] + 1, self.z_rings[1])


def catenoid_parameter(R: float, h: float) -> float:
    """Neck parameter ``c`` of the catenoid ``r(z) = c cosh(z/c)`` through rings at ``z = +-h``.

    Of the two roots of ``R = c cosh(h/c)`` the larger one is returned: it
    tends to ``R`` as ``h -> 0`` and is the area-minimising surface.
    """
    if R <= 0 or h < 0:
        raise ValueError("need R > 0 and h >= 0")
    if h == 0:
        return float(R)
    if h / R >= CATENOID_CRITICAL_RATIO:
        raise ValueError(f"no catenoid spans rings with h/R = {h / R:.4f} (limit {CATENOID_CRITICAL_RATIO:.4f})")
    f = lambda c: c * math.cosh(h / c) - R
    # f is decreasing in c below the fold at c* = h / 1.19968 and increasing above it
    c_fold = h / 1.1996786402577338
    c = brentq(f, c_fold, R, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    if abs(f(c)) > 1e-10:
        raise ArithmeticError(f"catenoid root check failed: residual {f(c):.3e}")
    return float(c)


def catenoid_phantom(N: int = 32, R: float = 10.0, h: float = 4.0) -> CatenoidPhantom:
    """Two filled coaxial discs (source) inside a cube whose faces are the sink.

    The volume is indexed ``[z, y, x]``; the rings sit on slices
    ``N//2 +- round(h)`` and are centred at ``(N-1)/2`` in-plane.
    """
    c = catenoid_parameter(R, h)
    zc = N // 2
    z0, z1 = zc - int(round(h)), zc + int(round(h))
    center = (N - 1) / 2.0
    if R + 1 > center or z0 < 1 or z1 > N - 2:
        raise ValueError("catenoid does not fit in the volume")
    z, y, x = np.indices((N, N, N))
    disc = (x - center) ** 2 + (y - center) ** 2 <= R ** 2
    fg = disc & ((z == z0) | (z == z1))
    bg = _border((N, N, N))
    graph = grid_graph((N, N, N), 1.0, fg, bg)
    return CatenoidPhantom(graph, fg, bg, c, zc, (z0, z1), center)


def slice_radii(mask, slices) -> np.ndarray:
    """Equivalent-disc radius ``sqrt(area / pi)`` of a 3d mask on each z slice."""
    mask = np.asarray(mask, dtype=bool)
    return np.sqrt(mask[np.asarray(slices)].sum(axis=(1, 2)) / np.pi)


def catenoid_rmse(phantom: CatenoidPhantom, mask) -> float:
    z = phantom.profile_slices()
    err = slice_radii(mask, z) - phantom.analytic_radius(z)
    return float(np.sqrt(np.mean(err ** 2)))


# --- karate club -----------------------------------------------------------------

KARATE_LEADERS = (0, 33)


def zachary_graph():
    """Weighted karate-club network as a transport graph.

    The instructor (node 0) is the source and the administrator (node 33)
    the sink.  Each member's capacity is the mean weight of its incident
    edges; the two leaders act as seeds and get the summed capacity of all
    members so they never saturate.  Returns ``(graph, truth)`` where ``truth[i]`` is 1 for members
    who joined the instructor's club.
    """
    G = nx.karate_club_graph()
    n = G.number_of_nodes()
    edges = [(u, v) for u, v in G.edges()]
    w = np.array([G[u][v].get("weight", 1.0) for u, v in edges], dtype=float)
    deg = np.zeros(n)
    tot = np.zeros(n)
    for (u, v), wk in zip(edges, w):
        deg[[u, v]] += 1
        tot[[u, v]] += wk
    g = tot / deg
    s, t = KARATE_LEADERS
    g[[s, t]] = g.sum() - g[s] - g[t]
    truth = np.array([G.nodes[i]["club"] == "Mr. Hi" for i in range(n)], dtype=np.uint8)
    return from_edges(n, edges, s, t, g), truth


# --- perimeter study -------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    kind: str  # "disc", "square" or "diamond"
    size: float  # radius, or half the side length

    @property
    def perimeter(self) -> float:
        if self.kind == "disc":
            return 2 * math.pi * self.size
        if self.kind in ("square", "diamond"):
            return 8.0 * self.size
        raise ValueError(f"unknown shape {self.kind!r}")

    def mask(self, shape, center) -> np.ndarray:
        yy, xx = np.indices(shape)
        dy, dx = yy - center[0], xx - center[1]
        if self.kind == "disc":
            return dy ** 2 + dx ** 2 <= self.size ** 2
        if self.kind == "square":
            return np.maximum(np.abs(dy), np.abs(dx)) <= self.size
        if self.kind == "diamond":
            # 45 degree square with the same side length
            return np.abs(dy) + np.abs(dx) <= self.size * math.sqrt(2.0)
        raise ValueError(f"unknown shape {self.kind!r}")

    def extent(self) -> float:
        return self.size * math.sqrt(2.0) if self.kind == "diamond" else self.size


def default_shapes(scales=(5, 7, 9, 11, 13), kinds=("disc", "square", "diamond")):
    return [Shape(k, float(s)) for k in kinds for s in scales]


def perimeter_instance(shape: Shape, margin: int = 4, gap: int = 2):
    """Uniform image with the shape as foreground seed and a background frame.

    The background seeds are all pixels at chessboard distance more than
    ``gap`` from the shape, so the cut runs through a ``gap``-wide free band
    around it.  Returns ``(dims, fg, bg)``.
    """
    if margin < gap + 1:
        raise ValueError("margin must exceed the free band")
    half = int(math.ceil(shape.extent())) + margin
    dims = (2 * half + 1, 2 * half + 1)
    center = (float(half), float(half))
    fg = shape.mask(dims, center)
    if fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any():
        raise GraphError("shape out of bounds")
    grown = fg.copy()
    for _ in range(gap):
        grown = _dilate8(grown)
    bg = ~grown
    if (half - shape.extent()) < margin - 1e-9:
        raise GraphError("shape violates the margin")
    return dims, fg, bg


def _dilate8(mask):
    out = mask.copy()
    p = np.pad(mask, 1)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= p[1 + dy:1 + dy + mask.shape[0], 1 + dx:1 + dx + mask.shape[1]]
    return out


def perimeter_row(shape: Shape, config=None) -> dict:
    """One study row: analytic perimeter, CCMF energy and graph-cut cost."""
    from .baselines import graph_cut_segment
    from .solver import solve

    dims, fg, bg = perimeter_instance(shape)
    graph = grid_graph(dims, 1.0, fg, bg, contract=False)
    flow, dual, report = solve(graph, config)
    report.raise_for_status()
    gc_cost, _ = graph_cut_segment(np.zeros(dims), fg, bg, beta=0.0)
    return {
        "kind": shape.kind,
        "size": shape.size,
        "perimeter": shape.perimeter,
        "ccmf_energy": 2.0 * float(dual.lam @ graph.g ** 2),
        "gc_cost": float(gc_cost),
        "iterations": report.iterations,
    }


def _row_job(args):
    return perimeter_row(*args)


def perimeter_study(shapes=None, config=None, workers: int = 1) -> list[dict]:
    shapes = default_shapes() if shapes is None else list(shapes)
    jobs = [(s, config) for s in shapes]
    if workers <= 1:
        return [_row_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_row_job, jobs))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y) -> LinearFit:
    res = stats.linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2))


def perimeter_fits(rows, key: str = "ccmf_energy") -> dict:
    """Pooled fit plus one fit per shape family of ``key`` against the analytic perimeter."""
    out = {"all": linear_fit([r["perimeter"] for r in rows], [r[key] for r in rows])}
    for kind in sorted({r["kind"] for r in rows}):
        sub = [r for r in rows if r["kind"] == kind]
        if len(sub) >= 2:
            out[kind] = linear_fit([r["perimeter"] for r in sub], [r[key] for r in sub])
    return out
