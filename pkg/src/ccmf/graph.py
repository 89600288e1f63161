"""Transport graphs and the discrete-calculus operators built on them.

A transport graph carries a source, a sink and one distinguished edge
oriented sink -> source, so that a divergence-free flow which is positive on
that edge moves ``F_st`` units from source to sink through the rest of the
graph.  Capacities live on nodes.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    """Raised for structurally invalid transport graphs or builder inputs."""


@dataclass(frozen=True, eq=False)
class TransportGraph:
    """Oriented graph with source, sink, st edge and node capacities ``g``.

    ``edge_axis`` records the lattice axis of each edge for grid graphs
    (-1 for edges that are not lattice edges); ``pixel_nodes`` maps every
    pixel of the originating image to its node id (seeds map to the
    terminals).  Both are ``None`` for graphs built from edge lists.
    """

    n: int
    edges: np.ndarray
    source: int
    sink: int
    st_edge: int
    g: np.ndarray
    edge_axis: np.ndarray | None = None
    pixel_nodes: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        g = np.asarray(self.g, dtype=float).ravel()
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "g", g)
        edges.flags.writeable = False
        g.flags.writeable = False

        n, m = self.n, len(edges)
        if g.shape != (n,):
            raise GraphError(f"g has length {g.size}, expected n={n}")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise GraphError("node capacities must be finite and strictly positive")
        if not (0 <= self.source < n and 0 <= self.sink < n) or self.source == self.sink:
            raise GraphError("source and sink must be distinct node ids")
        if m and (edges.min() < 0 or edges.max() >= n):
            raise GraphError("edge endpoint out of range")
        if not 0 <= self.st_edge < m:
            raise GraphError("st_edge index out of range")
        if tuple(edges[self.st_edge]) != (self.sink, self.source):
            raise GraphError("st_edge must be oriented sink -> source")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed")
        key = np.sort(edges, axis=1)
        if len(np.unique(key, axis=0)) != m:
            raise GraphError("duplicate edges (in either orientation) are not allowed")
        if self.edge_axis is not None:
            axis = np.asarray(self.edge_axis, dtype=np.int64)
            if axis.shape != (m,):
                raise GraphError("edge_axis must have one entry per edge")
            object.__setattr__(self, "edge_axis", axis)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def terminals(self) -> tuple[int, int]:
        return self.source, self.sink

    def non_terminal_nodes(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[[self.source, self.sink]] = False
        return np.flatnonzero(mask)

    def check_connected(self):
        """Raise if some node is cut off from the terminals.

        Nodes in a separate component carry identically zero flow and leave
        the dual potential undetermined, which makes the Newton system
        singular.
        """
        e = self.edges
        adj = sps.coo_matrix((np.ones(self.m), (e[:, 0], e[:, 1])), shape=(self.n, self.n))
        ncomp, labels = connected_components(adj, directed=False)
        if ncomp != 1:
            isolated = np.flatnonzero(labels != labels[self.source])
            raise GraphError(
                f"graph has {ncomp} components; nodes {isolated[:10].tolist()} "
                "are not connected to the source/sink"
            )

    def with_capacities(self, g) -> "TransportGraph":
        return TransportGraph(self.n, self.edges, self.source, self.sink, self.st_edge,
                              g, self.edge_axis, self.pixel_nodes)


@dataclass(frozen=True, eq=False)
class IncidenceOperator:
    """Signed incidence matrix ``A`` (m x n) and its entrywise absolute value."""

    A: sps.csr_matrix
    absA: sps.csr_matrix = field(repr=False)

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True, eq=False)
class SourceSinkIndicator:
    """``c`` selects the st edge; ``a`` is +1 at the source, -1 at the sink."""

    c: np.ndarray
    a: np.ndarray


def from_edges(n: int, edges: Iterable[Sequence[int]], source: int, sink: int,
               g, st_edge: int | None = None) -> TransportGraph:
    """Build a transport graph from an explicit edge list.

    If ``st_edge`` is None the edge ``(sink, source)`` is appended.
    """
    edges = [tuple(int(v) for v in e) for e in edges]
    if st_edge is None:
        edges.append((sink, source))
        st_edge = len(edges) - 1
    return TransportGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2),
                          source, sink, st_edge, g)


def build_incidence(graph: TransportGraph) -> IncidenceOperator:
    m, n = graph.m, graph.n
    rows = np.repeat(np.arange(m), 2)
    cols = graph.edges.ravel()
    vals = np.tile([1.0, -1.0], m)
    A = sps.csr_matrix((vals, (rows, cols)), shape=(m, n))
    absA = abs(A).tocsr()
    return IncidenceOperator(A, absA)


def source_sink_indicator(graph: TransportGraph) -> SourceSinkIndicator:
    c = np.zeros(graph.m)
    c[graph.st_edge] = 1.0
    a = np.zeros(graph.n)
    a[graph.source] = 1.0
    a[graph.sink] = -1.0
    return SourceSinkIndicator(c, a)


def _check_edge_vector(op: IncidenceOperator, F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape != (op.shape[0],):
        raise ValueError(f"flow vector has shape {F.shape}, expected ({op.shape[0]},)")
    return F


def divergence(op: IncidenceOperator, F) -> np.ndarray:
    """``A^T F``: outgoing minus incoming flow at every node."""
    return op.A.T @ _check_edge_vector(op, F)


def pointwise_flow_norm(op: IncidenceOperator, F) -> np.ndarray:
    """Euclidean norm of the flows on the edges incident to each node."""
    F = _check_edge_vector(op, F)
    return np.sqrt(op.absA.T @ (F * F))


# --- lattice builders -------------------------------------------------------

def _as_mask(seeds, shape) -> np.ndarray:
    seeds = np.asarray(seeds)
    if seeds.dtype == bool and seeds.shape == shape:
        return seeds
    mask = np.zeros(shape, dtype=bool)
    idx = np.atleast_2d(seeds)
    if idx.size:
        if idx.shape[1] != len(shape):
            raise GraphError(f"seed coordinates must have {len(shape)} components")
        if np.any(idx < 0) or np.any(idx >= np.array(shape)):
            raise GraphError("seed coordinate outside the image")
        mask[tuple(idx.T)] = True
    return mask


def _lattice_pairs(shape):
    """Yield (flat_tail, flat_head, axis) arrays for the 2d/3d nearest-neighbour lattice."""
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    for axis in range(len(shape)):
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        yield flat[tuple(lo)].ravel(), flat[tuple(hi)].ravel(), axis


def grid_graph(dims, node_capacities, fg_seeds, bg_seeds, terminal_capacity=None,
               contract: bool = True) -> TransportGraph:
    """4-connected (2d) or 6-connected (3d) transport graph over an image.

    Foreground seeds are contracted into the source and background seeds into
    the sink.  Edges between two seeds are dropped; parallel edges created by
    the contraction are merged.  Node ids are: source 0, unlabelled pixels in
    raster order, sink last.

    With ``contract=False`` every pixel keeps its own node (ids 1..P in raster
    order) and seed pixels are hung off the terminals by one edge each, with
    the terminal capacity as their node capacity.  This avoids the merged
    parallel edges, which carry the flow of several lattice edges through one
    squared term.
    """
    shape = tuple(int(d) for d in dims)
    if len(shape) not in (2, 3):
        raise GraphError("only 2d and 3d grids are supported")
    g = np.broadcast_to(np.asarray(node_capacities, dtype=float), shape)
    fg = _as_mask(fg_seeds, shape)
    bg = _as_mask(bg_seeds, shape)
    if not fg.any() or not bg.any():
        raise GraphError("both seed sets must be non-empty")
    if np.any(fg & bg):
        raise GraphError("foreground and background seeds overlap")
    free = ~(fg | bg)
    if np.any(g[free] <= 0):
        raise GraphError("pixel capacities must be strictly positive")
    if not contract:
        return _uncontracted_grid(shape, g, fg, bg, terminal_capacity)

    k = int(free.sum())
    source, sink = 0, k + 1
    node_of = np.empty(shape, dtype=np.int64)
    node_of[free] = np.arange(1, k + 1)
    node_of[fg] = source
    node_of[bg] = sink
    flat_nodes = node_of.ravel()

    tails, heads, axes = [], [], []
    for a, b, axis in _lattice_pairs(shape):
        u, v = flat_nodes[a], flat_nodes[b]
        keep = u != v
        # a direct fg-bg adjacency would duplicate the st edge
        keep &= ~(((u == source) & (v == sink)) | ((u == sink) & (v == source)))
        u, v = u[keep], v[keep]
        tails.append(np.minimum(u, v))
        heads.append(np.maximum(u, v))
        axes.append(np.full(u.size, axis))
    pairs = np.column_stack([np.concatenate(tails), np.concatenate(heads)])
    axes = np.concatenate(axes)
    _, first = np.unique(pairs, axis=0, return_index=True)
    first.sort()
    pairs, axes = pairs[first], axes[first]

    edges = np.vstack([pairs, [[sink, source]]])
    edge_axis = np.append(axes, -1)
    gn = np.empty(k + 2)
    gn[1:k + 1] = g[free]
    gt = float(gn[1:k + 1].sum()) if terminal_capacity is None else float(terminal_capacity)
    gn[source] = gn[sink] = gt if k else 1.0
    return TransportGraph(k + 2, edges, source, sink, len(edges) - 1, gn, edge_axis, node_of)


def _uncontracted_grid(shape, g, fg, bg, terminal_capacity) -> TransportGraph:
    P = int(np.prod(shape))
    source, sink = 0, P + 1
    node_of = np.arange(1, P + 1).reshape(shape)
    lab = (fg.astype(np.int8) - bg.astype(np.int8)).ravel()
    tails, heads, axes = [], [], []
    for a, b, axis in _lattice_pairs(shape):
        keep = lab[a] * lab[b] >= 0
        tails.append(a[keep] + 1)
        heads.append(b[keep] + 1)
        axes.append(np.full(int(keep.sum()), axis))
    fg_nodes = node_of[fg]
    bg_nodes = node_of[bg]
    tails += [np.full(fg_nodes.size, source), bg_nodes]
    heads += [fg_nodes, np.full(bg_nodes.size, sink)]
    axes += [np.full(fg_nodes.size + bg_nodes.size, -1)]
    edges = np.vstack([np.column_stack([np.concatenate(tails), np.concatenate(heads)]), [[sink, source]]])
    edge_axis = np.append(np.concatenate(axes), -1)
    free = ~(fg | bg)
    gt = float(g[free].sum()) if terminal_capacity is None else float(terminal_capacity)
    gt = gt if gt > 0 else 1.0
    gn = np.empty(P + 2)
    gn[1:P + 1] = np.where(free, g, gt).ravel()
    gn[source] = gn[sink] = gt
    return TransportGraph(P + 2, edges, source, sink, len(edges) - 1, gn, edge_axis, node_of)


def lattice_graph(dims, node_capacities) -> TransportGraph:
    """Unseeded lattice plus isolated source and sink joined only by the st edge.

    Meant as the base for :func:`attach_unary_terms`; it does not pass
    :meth:`TransportGraph.check_connected` on its own.
    """
    shape = tuple(int(d) for d in dims)
    g = np.broadcast_to(np.asarray(node_capacities, dtype=float), shape).ravel()
    k = g.size
    source, sink = 0, k + 1
    tails, heads, axes = [], [], []
    for a, b, axis in _lattice_pairs(shape):
        tails.append(a + 1)
        heads.append(b + 1)
        axes.append(np.full(a.size, axis))
    pairs = np.column_stack([np.concatenate(tails), np.concatenate(heads)]) if tails else np.empty((0, 2), int)
    edges = np.vstack([pairs.reshape(-1, 2), [[sink, source]]])
    edge_axis = np.append(np.concatenate(axes) if axes else [], -1)
    gn = np.concatenate([[g.sum()], g, [g.sum()]])
    node_of = np.arange(1, k + 1).reshape(shape)
    return TransportGraph(k + 2, edges, source, sink, len(edges) - 1, gn, edge_axis, node_of)


def attach_unary_terms(graph: TransportGraph, fg_prior, bg_prior, terminal_capacity=None) -> TransportGraph:
    """Route every non-terminal node to the source and sink through weighted intermediaries.

    For node v an "upper" node of capacity ``fg_prior[v]`` sits on the path
    source -> upper -> v, and a "lower" node of capacity ``bg_prior[v]`` on
    v -> lower -> sink.  Priors are indexed by node id (length n); entries at
    the terminals are ignored.
    """
    nodes = graph.non_terminal_nodes()
    fg = np.asarray(fg_prior, dtype=float).ravel()
    bg = np.asarray(bg_prior, dtype=float).ravel()
    if fg.shape != (graph.n,) or bg.shape != (graph.n,):
        raise GraphError(f"priors must have length n={graph.n}")
    fg, bg = fg[nodes], bg[nodes]
    if np.any(~(fg > 0)) or np.any(~(bg > 0)):
        raise GraphError("unary priors must be strictly positive")

    k = nodes.size
    upper = graph.n + np.arange(k)
    lower = graph.n + k + np.arange(k)
    s, t = graph.source, graph.sink
    new_edges = np.concatenate([
        np.column_stack([np.full(k, s), upper]),
        np.column_stack([upper, nodes]),
        np.column_stack([nodes, lower]),
        np.column_stack([lower, np.full(k, t)]),
    ])
    edges = np.vstack([graph.edges, new_edges])
    g = np.concatenate([graph.g, fg, bg])
    if terminal_capacity is None:
        mask = np.ones(g.size, dtype=bool)
        mask[[s, t]] = False
        terminal_capacity = g[mask].sum()
    g[[s, t]] = terminal_capacity
    axis = None
    if graph.edge_axis is not None:
        axis = np.concatenate([graph.edge_axis, np.full(4 * k, -1)])
    return TransportGraph(graph.n + 2 * k, edges, s, t, graph.st_edge, g, axis, graph.pixel_nodes)


# --- text interchange -------------------------------------------------------

def write_graph(graph: TransportGraph, path_or_file):
    """Write ``ccmf-graph n m source sink st_edge`` followed by edges and capacities."""
    lines = [f"ccmf-graph {graph.n} {graph.m} {graph.source} {graph.sink} {graph.st_edge}"]
    lines += [f"{u} {v}" for u, v in graph.edges]
    lines += [repr(float(x)) for x in graph.g]
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file, "w") as fh:
            fh.write(text)
    else:
        path_or_file.write(text)


def read_graph(path_or_file) -> TransportGraph:
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file) as fh:
            text = fh.read()
    else:
        text = path_or_file.read()
    tokens = io.StringIO(text).read().split()
    if len(tokens) < 6 or tokens[0] != "ccmf-graph":
        raise GraphError("missing 'ccmf-graph' header")
    try:
        n, m, source, sink, st_edge = (int(x) for x in tokens[1:6])
    except ValueError as exc:
        raise GraphError(f"malformed graph header: {exc}") from exc
    body = tokens[6:]
    if len(body) != 2 * m + n:
        raise GraphError(f"expected {2 * m} edge ids and {n} capacities, got {len(body)} tokens")
    try:
        edges = np.array(body[:2 * m], dtype=np.int64).reshape(m, 2)
        g = np.array(body[2 * m:], dtype=float)
    except ValueError as exc:
        raise GraphError(f"malformed graph file: {exc}") from exc
    return TransportGraph(n, edges, source, sink, st_edge, g)
