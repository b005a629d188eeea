"""JSON-lines graph files (``sak-graphs-v1``) with a sibling splits file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .graph import TASKS, Dataset, Graph, GraphError

FORMAT = "sak-graphs-v1"


class GraphFormatError(GraphError):
    """Malformed graph file; the message names the line and field."""

    def __init__(self, lineno: int, field: str, reason: str):
        self.lineno = lineno
        self.field = field
        super().__init__(f"line {lineno}: field {field!r}: {reason}")


def splits_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".splits.json")


def _width(rows) -> int:
    return 0 if rows is None else int(np.asarray(rows).shape[1])


def _graph_record(g: Graph, task) -> dict:
    rec = {"n": g.num_nodes, "edges": [list(e) for e in g.edges]}
    if g.node_features is not None:
        rec["x"] = g.node_features.tolist()
    if g.edge_features is not None:
        rec["e"] = g.edge_features.tolist()
    # unlabeled corpora (task None) carry no targets
    if task == "node-classification":
        rec["y"] = g.node_labels.tolist()
    elif task is not None:
        y = g.graph_label
        rec["y"] = list(y) if isinstance(y, tuple) else y
    return rec


def save_graphs(ds: Dataset, path) -> None:
    path = Path(path)
    first = ds.graphs[0] if ds.graphs else None
    header = {
        "format": FORMAT,
        "task": ds.task,
        "node_feature_dim": _width(first.node_features) if first else 0,
        "edge_feature_dim": _width(first.edge_features) if first else 0,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in ds.graphs:
            fh.write(json.dumps(_graph_record(g, ds.task)) + "\n")
    if ds.split:
        splits_path(path).write_text(json.dumps({k: list(v) for k, v in ds.split.items()}))


def _parse_graph(rec, lineno: int, header: dict) -> Graph:
    if not isinstance(rec, dict):
        raise GraphFormatError(lineno, "<record>", "expected a JSON object")
    if "n" not in rec:
        raise GraphFormatError(lineno, "n", "missing")
    n = rec["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise GraphFormatError(lineno, "n", f"expected a positive integer, got {n!r}")
    edges = rec.get("edges", [])
    if not isinstance(edges, list) or any(
        not isinstance(e, list) or len(e) != 2 or not all(isinstance(v, int) for v in e)
        for e in edges
    ):
        raise GraphFormatError(lineno, "edges", "expected a list of [i, j] integer pairs")

    def matrix(key, rows, width):
        if key not in rec:
            return None
        try:
            arr = np.asarray(rec[key], dtype=float)
        except (TypeError, ValueError) as exc:
            raise GraphFormatError(lineno, key, f"not a numeric matrix ({exc})") from None
        if arr.ndim != 2 or arr.shape[0] != rows:
            raise GraphFormatError(lineno, key, f"expected {rows} rows, got shape {arr.shape}")
        if width and arr.shape[1] != width:
            raise GraphFormatError(lineno, key, f"expected width {width}, got {arr.shape[1]}")
        return arr

    x = matrix("x", n, header.get("node_feature_dim") or 0)
    e = matrix("e", len(edges), header.get("edge_feature_dim") or 0)
    node_labels = graph_label = None
    if "y" in rec:
        y = rec["y"]
        if header.get("task") == "node-classification":
            if not isinstance(y, list) or len(y) != n:
                raise GraphFormatError(lineno, "y", f"expected {n} node labels")
            node_labels = y
        else:
            graph_label = y
    try:
        Graph(n, [tuple(p) for p in edges])
    except GraphError as exc:
        raise GraphFormatError(lineno, "edges", str(exc)) from None
    try:
        return Graph(n, [tuple(p) for p in edges], x, e, node_labels, graph_label)
    except GraphError as exc:
        raise GraphFormatError(lineno, "y", str(exc)) from None


def load_graphs(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not any(line.strip() for line in lines):
        return Dataset()
    header = None
    graphs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(lineno, "<json>", exc.msg) from None
        if header is None:
            if not isinstance(rec, dict) or rec.get("format") != FORMAT:
                raise GraphFormatError(lineno, "format", f"expected header with format {FORMAT!r}")
            if rec.get("task") is not None and rec["task"] not in TASKS:
                raise GraphFormatError(lineno, "task", f"unknown task {rec['task']!r}")
            header = rec
            continue
        graphs.append(_parse_graph(rec, lineno, header))
    split = {}
    sp = splits_path(path)
    if sp.exists():
        split = json.loads(sp.read_text())
    return Dataset(graphs, header.get("task"), split)
