"""Reference methods: edge-capacitated graph cuts and the Appleton-Talbot PDE iteration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov

from .graph import GraphError, TransportGraph, _as_mask, _lattice_pairs, build_incidence, from_edges


@dataclass(frozen=True, eq=False)
class EdgeCapacitatedGraph:
    """Transport-graph topology with one capacity per edge (st edge ignored).

    Edges are undirected for the purpose of the capacity bound ``|F| <= cap``.
    """

    n: int
    edges: np.ndarray
    source: int
    sink: int
    st_edge: int
    capacity: np.ndarray
    pixel_nodes: np.ndarray | None = None

    def __post_init__(self):
        cap = np.asarray(self.capacity, dtype=float)
        object.__setattr__(self, "capacity", cap)
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        if cap.shape != (len(self.edges),):
            raise GraphError("need one capacity per edge")
        keep = np.ones(cap.size, dtype=bool)
        if 0 <= self.st_edge < cap.size:
            keep[self.st_edge] = False
        if np.any(~(cap[keep] > 0)):
            raise GraphError("edge capacities must be strictly positive")

    @classmethod
    def from_transport(cls, graph: TransportGraph, capacity) -> "EdgeCapacitatedGraph":
        return cls(graph.n, graph.edges, graph.source, graph.sink, graph.st_edge,
                   capacity, graph.pixel_nodes)


def classical_maxflow(graph: EdgeCapacitatedGraph):
    """Exact max-flow value and a minimum cut labelling (1 = source side)."""
    G = nx.DiGraph()
    G.add_nodes_from(range(graph.n))
    for k, ((u, v), cap) in enumerate(zip(graph.edges, graph.capacity)):
        if k == graph.st_edge:
            continue
        for a, b in ((u, v), (v, u)):
            if G.has_edge(a, b):
                G[a][b]["capacity"] += cap
            else:
                G.add_edge(int(a), int(b), capacity=float(cap))
    value, (side_s, _) = nx.minimum_cut(G, graph.source, graph.sink, flow_func=boykov_kolmogorov)
    mask = np.zeros(graph.n, dtype=np.uint8)
    mask[list(side_s)] = 1
    return float(value), mask


def cut_cost(graph: EdgeCapacitatedGraph, mask) -> float:
    """Total capacity of non-st edges whose endpoints carry different labels."""
    mask = np.asarray(mask)
    keep = np.ones(len(graph.edges), dtype=bool)
    keep[graph.st_edge] = False
    e = graph.edges[keep]
    return float(graph.capacity[keep][mask[e[:, 0]] != mask[e[:, 1]]].sum())


def gc_edge_weights(image, beta: float) -> np.ndarray:
    """``exp(-beta (I_i - I_j)^2)`` for every nearest-neighbour pixel pair.

    Pairs are ordered axis by axis, raster order within an axis.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    img = np.asarray(image, dtype=float)
    flat = img.ravel()
    out = [np.exp(-beta * (flat[a] - flat[b]) ** 2) for a, b, _ in _lattice_pairs(img.shape)]
    return np.concatenate(out)


def gc_grid_graph(shape, weights, fg_seeds, bg_seeds) -> EdgeCapacitatedGraph:
    """Lattice graph cut instance; seeds are contracted and parallel capacities summed."""
    shape = tuple(shape)
    fg = _as_mask(fg_seeds, shape)
    bg = _as_mask(bg_seeds, shape)
    if not fg.any() or not bg.any():
        raise GraphError("both seed sets must be non-empty")
    if np.any(fg & bg):
        raise GraphError("foreground and background seeds overlap")
    free = ~(fg | bg)
    k = int(free.sum())
    s, t = 0, k + 1
    node_of = np.empty(shape, dtype=np.int64)
    node_of[free] = np.arange(1, k + 1)
    node_of[fg] = s
    node_of[bg] = t
    flat = node_of.ravel()
    weights = np.asarray(weights, dtype=float)
    us, vs = [], []
    for a, b, _ in _lattice_pairs(shape):
        us.append(flat[a])
        vs.append(flat[b])
    u, v = np.concatenate(us), np.concatenate(vs)
    if weights.shape != u.shape:
        raise GraphError("one weight per lattice pair expected")
    keep = u != v
    lo, hi, w = np.minimum(u, v)[keep], np.maximum(u, v)[keep], weights[keep]
    pairs, inv = np.unique(np.column_stack([lo, hi]), axis=0, return_inverse=True)
    cap = np.bincount(inv.ravel(), weights=w, minlength=len(pairs))
    edges = np.vstack([pairs, [[t, s]]])
    cap = np.append(cap, 1.0)
    return EdgeCapacitatedGraph(k + 2, edges, s, t, len(edges) - 1, cap, node_of)


def graph_cut_segment(image, fg_seeds, bg_seeds, beta: float):
    """Classical graph-cut segmentation; returns ``(cut value, pixel mask)``."""
    img = np.asarray(image, dtype=float)
    G = gc_grid_graph(img.shape, gc_edge_weights(img, beta), fg_seeds, bg_seeds)
    value, labels = classical_maxflow(G)
    return value, labels[G.pixel_nodes]


# --- Appleton-Talbot continuous max-flow -----------------------------------

@dataclass
class AtCmfResult:
    P: np.ndarray
    F: np.ndarray
    trace: np.ndarray
    tau: float

    def pixels(self, graph: TransportGraph) -> np.ndarray:
        return self.P[graph.pixel_nodes]


def at_cmf_project(graph: TransportGraph, F) -> np.ndarray:
    """Scale flows so that ``sum_axis max_{incident on axis} F^2 <= g^2`` at every non-terminal node.

    Each edge is scaled by the smaller of its endpoints' factors, so the
    bound holds exactly after one pass.
    """
    return _Projector(graph, graph.edges, graph.edge_axis)(np.asarray(F, dtype=float))


def at_cmf_solve(graph: TransportGraph, iters: int, tau: float | None = None) -> AtCmfResult:
    """Explicit Appleton-Talbot iteration on a lattice transport graph.

    Each step: ``P <- P - tau A^T F`` (terminals pinned to 1 and 0),
    ``F <- F + tau A P`` (``-A`` is the discrete gradient), then the
    axis-grouped capacity projection.  The trace holds, per iteration, the
    minimum and maximum of ``P`` over free nodes and the number of free nodes
    with ``P > 1/2``.
    """
    if graph.edge_axis is None or graph.pixel_nodes is None:
        raise GraphError("AT-CMF needs a lattice graph (edge axes undefined)")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ndim = graph.pixel_nodes.ndim
    tau = 1.0 / math.sqrt(ndim) if tau is None else float(tau)
    op = build_incidence(graph)
    keep = np.ones(graph.m, dtype=bool)
    keep[graph.st_edge] = False
    A = op.A[np.flatnonzero(keep)].tocsr()
    AT = A.T.tocsr()
    edges_k = graph.edges[keep]
    axis_k = graph.edge_axis[keep]

    P = np.zeros(graph.n)
    P[graph.source] = 1.0
    F = np.zeros(int(keep.sum()))
    free = graph.non_terminal_nodes()
    trace = np.empty((iters, 3))
    proj = _Projector(graph, edges_k, axis_k)
    for k in range(iters):
        P -= tau * (AT @ F)
        P[graph.source], P[graph.sink] = 1.0, 0.0
        F += tau * (A @ P)
        F = proj(F)
        Pf = P[free]
        trace[k] = Pf.min(), Pf.max(), np.count_nonzero(Pf > 0.5)
    full = np.zeros(graph.m)
    full[keep] = F
    return AtCmfResult(P, full, trace, tau)


class _Projector:
    def __init__(self, graph, edges, axis):
        self.edges = edges
        self.axis = axis
        self.g = graph.g
        self.terminals = [graph.source, graph.sink]
        self.sel = [np.flatnonzero(axis == a) for a in range(int(axis.max()) + 1)]
        self.n = graph.n

    def __call__(self, F):
        e = self.edges
        absF = np.abs(F)
        sq = np.zeros(self.n)
        for idx in self.sel:
            peak = np.zeros(self.n)
            np.maximum.at(peak, e[idx, 0], absF[idx])
            np.maximum.at(peak, e[idx, 1], absF[idx])
            sq += peak ** 2
        norm = np.sqrt(sq)
        scale = np.ones(self.n)
        over = norm > self.g
        scale[over] = self.g[over] / norm[over]
        scale[self.terminals] = 1.0
        return F * np.minimum(scale[e[:, 0]], scale[e[:, 1]])


# --- metrication probe ---------------------------------------------------------

def _seeded_layers(layers, rows, connect, seed_capacity):
    """Layered periodic graph: seed layer, ``layers`` free layers, seed layer.

    ``connect(j)`` lists the indices in the next layer linked to index j.
    Seed layers are explicit high-capacity nodes hung off the terminals so
    that no parallel edges are merged next to the cut.
    """
    K = layers + 2
    node = lambda k, j: 1 + k * rows + j
    s, t = 0, 1 + K * rows
    edges = []
    for j in range(rows):
        edges.append((s, node(0, j)))
        edges.append((node(K - 1, j), t))
    for k in range(K - 1):
        for j in range(rows):
            for jj in connect(j):
                edges.append((node(k, j), node(k + 1, jj % rows)))
    g = np.ones(t + 1)
    seed_nodes = [node(k, j) for k in (0, K - 1) for j in range(rows)]
    g[seed_nodes] = seed_capacity
    g[[s, t]] = seed_capacity * rows
    return edges, s, t, g


def metrication_graphs(length: int, layers: int = 6):
    """Periodic uniform-capacity strips whose cut is an axis-aligned or a 45 degree line.

    Returns ``((axis_graph, axis_len), (diag_graph, diag_len))`` where the
    lengths are the Euclidean lengths of the cut lines.
    """
    rows_axis = int(length)
    # axis strip: each node links straight ahead; the periodic column supplies the transverse edges
    edges, s, t, g = _seeded_layers(layers, rows_axis, lambda j: [j], float(rows_axis * 10))
    K = layers + 2
    for k in range(1, K - 1):
        for j in range(rows_axis):
            edges.append((1 + k * rows_axis + j, 1 + k * rows_axis + (j + 1) % rows_axis))
    axis_graph = from_edges(t + 1, edges, s, t, g)

    # 45 degree strip: lattice points on anti-diagonals x + y = k, periodic along (p, -p)
    p = max(2, int(round(length / math.sqrt(2))))
    edges, s, t, g = _seeded_layers(layers, p, lambda j: [j, j + 1], float(p * 10))
    diag_graph = from_edges(t + 1, edges, s, t, g)
    return (axis_graph, float(rows_axis)), (diag_graph, p * math.sqrt(2))


def metrication_probe(length: int, config=None):
    """Graph-cut and CCMF energies for equal-length axis and diagonal cuts.

    Energies are normalised to a line of Euclidean length ``length``.
    Returns ``(gc_diag, gc_axis, ccmf_diag, ccmf_axis)``.
    """
    from .solver import solve

    if length < 8:
        raise ValueError("probe length must be at least 8 pixels")
    out = {}
    for name, (graph, true_len) in zip(("axis", "diag"), metrication_graphs(length)):
        cap = np.ones(graph.m)
        seedish = graph.g > 1
        e = graph.edges
        # edges touching seed nodes are never cut by the classical solver
        cap[seedish[e[:, 0]] | seedish[e[:, 1]]] = 1e6
        gc_value, _ = classical_maxflow(EdgeCapacitatedGraph.from_transport(graph, cap))
        flow, dual, report = solve(graph, config)
        report.raise_for_status()
        energy = 2.0 * float(dual.lam @ graph.g ** 2)
        scale = length / true_len
        out[name] = (gc_value * scale, energy * scale)
    return out["diag"][0], out["axis"][0], out["diag"][1], out["axis"][1]
