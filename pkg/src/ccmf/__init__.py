"""Combinatorial continuous max-flow: node-capacitated max-flow solved by a
primal-dual interior-point method, with graph-cut and Appleton-Talbot
baselines and the experiment drivers built on them."""

__version__ = "0.1.0"

from .graph import GraphError, TransportGraph, from_edges, grid_graph  # noqa: E402
from .solver import SolverConfig, preset, solve  # noqa: E402

__all__ = ["GraphError", "TransportGraph", "SolverConfig", "from_edges", "grid_graph",
           "preset", "solve", "__version__"]
