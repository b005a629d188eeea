"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .graph import Dataset, Graph, GraphError


def check_graphs(X, min_graphs: int = 1) -> list:
    """Coerce ``X`` (a Graph, a Dataset or a sequence of Graphs) to a list of Graphs.

    All graphs must agree on node- and edge-feature widths.
    """
    if isinstance(X, Graph):
        graphs = [X]
    elif isinstance(X, Dataset):
        graphs = list(X.graphs)
    elif isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"expected a Graph or a sequence of Graphs, got {type(X).__name__}")
    else:
        graphs = list(X)
    for i, g in enumerate(graphs):
        if not isinstance(g, Graph):
            raise TypeError(f"element {i} is a {type(g).__name__}, not a Graph")
    if len(graphs) < min_graphs:
        raise ValueError(f"need at least {min_graphs} graph(s), got {len(graphs)}")
    node_widths = {g.node_feature_matrix().shape[1] for g in graphs}
    if len(node_widths) > 1:
        raise GraphError(f"graphs disagree on node feature width: {sorted(node_widths)}")
    edge_widths = {g.edge_feature_matrix().shape[1] for g in graphs if g.num_edges}
    if len(edge_widths) > 1:
        raise GraphError(f"graphs disagree on edge feature width: {sorted(edge_widths)}")
    return graphs


def feature_widths(graphs: Sequence[Graph]) -> tuple[int, int]:
    node = graphs[0].node_feature_matrix().shape[1]
    edge = next((g.edge_feature_matrix().shape[1] for g in graphs if g.num_edges), 1)
    return node, edge


def check_node_targets(graphs: Sequence[Graph], y: Optional[Sequence]) -> list:
    """Per-graph integer label arrays; falls back to each graph's own ``node_labels``."""
    if y is None:
        if any(g.node_labels is None for g in graphs):
            raise ValueError("y is None and some graphs carry no node_labels")
        return [np.asarray(g.node_labels) for g in graphs]
    y = list(y)
    if len(y) != len(graphs):
        raise ValueError(f"got {len(y)} label arrays for {len(graphs)} graphs")
    out = []
    for i, (g, labels) in enumerate(zip(graphs, y)):
        labels = np.asarray(labels)
        if labels.shape != (g.num_nodes,):
            raise ValueError(f"graph {i}: labels have shape {labels.shape}, expected ({g.num_nodes},)")
        out.append(labels)
    return out


def check_graph_targets(graphs: Sequence[Graph], y) -> np.ndarray:
    """Targets as an (n_graphs, ...) array; falls back to each graph's ``graph_label``."""
    if y is None:
        if any(g.graph_label is None for g in graphs):
            raise ValueError("y is None and some graphs carry no graph_label")
        y = [np.ravel(g.graph_label) for g in graphs]
    y = np.asarray(y, dtype=float)
    if y.shape[0] != len(graphs):
        raise ValueError(f"got {y.shape[0]} targets for {len(graphs)} graphs")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y
