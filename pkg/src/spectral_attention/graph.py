"""Simple undirected graphs, datasets and small synthetic generators."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TASKS = ("graph-regression", "graph-classification", "node-classification")

# factorial search guard for brute_force_isomorphic
MAX_ISO_NODES = 10


class GraphError(ValueError):
    """Invalid graph structure or arguments."""


class GraphSizeError(GraphError):
    """Graph too large for an exhaustive routine."""


def _frozen(a, dtype=float) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph on nodes ``0..num_nodes-1``.

    Edges are stored once as sorted ``(i, j)`` pairs with ``i < j``, in
    lexicographic order. ``edge_features`` rows follow that order.
    """

    num_nodes: int
    edges: tuple = ()
    node_features: Optional[np.ndarray] = None
    edge_features: Optional[np.ndarray] = None
    node_labels: Optional[np.ndarray] = None
    graph_label: object = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 1:
            raise GraphError(f"num_nodes must be positive, got {self.num_nodes}")
        object.__setattr__(self, "num_nodes", n)

        pairs = []
        for e in self.edges:
            i, j = (int(v) for v in e)
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) has an endpoint outside [0, {n})")
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            pairs.append((min(i, j), max(i, j)))
        order = sorted(range(len(pairs)), key=pairs.__getitem__)
        ordered = tuple(pairs[k] for k in order)
        if len(set(ordered)) != len(ordered):
            raise GraphError("duplicate edge")
        object.__setattr__(self, "edges", ordered)

        x = _frozen(self.node_features)
        if x is not None:
            if x.ndim == 1:
                x = _frozen(x.reshape(-1, 1))
            if x.ndim != 2 or x.shape[0] != n:
                raise GraphError(f"node_features must be {n} x d, got shape {x.shape}")
        object.__setattr__(self, "node_features", x)

        e = _frozen(self.edge_features)
        if e is not None:
            if e.ndim == 1:
                e = e.reshape(-1, 1)
            if e.ndim != 2 or e.shape[0] != len(ordered):
                raise GraphError(
                    f"edge_features must have one row per edge ({len(ordered)}), got shape {e.shape}"
                )
            e = _frozen(e[order])
        object.__setattr__(self, "edge_features", e)

        y = self.node_labels
        if y is not None:
            y = _frozen(y, dtype=np.int64)
            if y.shape != (n,):
                raise GraphError(f"node_labels must have length {n}, got shape {y.shape}")
        object.__setattr__(self, "node_labels", y)

        g = self.graph_label
        if isinstance(g, (list, tuple, np.ndarray)):
            g = tuple(float(v) for v in np.ravel(g))
        object.__setattr__(self, "graph_label", g)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self, i: int) -> list[int]:
        return [b if a == i else a for a, b in self.edges if i in (a, b)]

    def node_feature_matrix(self) -> np.ndarray:
        """Node features, or a single constant 1.0 column when absent."""
        if self.node_features is None:
            return np.ones((self.num_nodes, 1))
        return np.asarray(self.node_features)

    def edge_feature_matrix(self) -> np.ndarray:
        """Edge features, or a single constant 1.0 column when absent."""
        if self.edge_features is None:
            return np.ones((self.num_edges, 1))
        return np.asarray(self.edge_features)

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the graph with node ``i`` renamed ``perm[i]``."""
        perm = np.asarray(perm, dtype=int)
        if sorted(perm.tolist()) != list(range(self.num_nodes)):
            raise GraphError("perm is not a permutation of the node set")
        inv = np.argsort(perm)
        edges = [(perm[i], perm[j]) for i, j in self.edges]
        x = None if self.node_features is None else self.node_features[inv]
        y = None if self.node_labels is None else self.node_labels[inv]
        return Graph(self.num_nodes, edges, x, self.edge_features, y, self.graph_label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.edges == other.edges
            and _arr_eq(self.node_features, other.node_features)
            and _arr_eq(self.edge_features, other.edge_features)
            and _arr_eq(self.node_labels, other.node_labels)
            and self.graph_label == other.graph_label
        )

    def __hash__(self) -> int:
        return hash((self.num_nodes, self.edges))

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(eq=False)
class Dataset:
    """Ordered graphs plus a task name and train/val/test index lists.

    ``task`` may be ``None`` for unlabeled corpora (e.g. the WL experiments).
    """

    graphs: list = field(default_factory=list)
    task: Optional[str] = None
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        self.graphs = list(self.graphs)
        if self.task is not None and self.task not in TASKS:
            raise GraphError(f"unknown task {self.task!r}; expected one of {TASKS}")
        seen: set[int] = set()
        for name, idx in self.split.items():
            idx = [int(i) for i in idx]
            for i in idx:
                if not 0 <= i < len(self.graphs):
                    raise GraphError(f"split {name!r} index {i} out of range")
                if i in seen:
                    raise GraphError(f"split index {i} appears in more than one split")
                seen.add(i)
            self.split[name] = idx
        if self.task == "node-classification":
            if any(g.node_labels is None for g in self.graphs):
                raise GraphError("node-classification requires node_labels on every graph")
        elif self.task in ("graph-regression", "graph-classification"):
            if any(g.graph_label is None for g in self.graphs):
                raise GraphError(f"{self.task} requires graph_label on every graph")

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, name: str) -> list:
        return [self.graphs[i] for i in self.split.get(name, [])]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.task == other.task
            and self.graphs == other.graphs
            and {k: list(v) for k, v in self.split.items()}
            == {k: list(v) for k, v in other.split.items()}
        )


def degree_vector(g: Graph) -> np.ndarray:
    deg = np.zeros(g.num_nodes, dtype=np.int64)
    for i, j in g.edges:
        deg[i] += 1
        deg[j] += 1
    return deg


def is_connected(g: Graph) -> bool:
    seen = {0}
    stack = [0]
    adj = [[] for _ in range(g.num_nodes)]
    for i, j in g.edges:
        adj[i].append(j)
        adj[j].append(i)
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == g.num_nodes


# -- generators ---------------------------------------------------------------


def community_sizes(num_nodes: int, num_communities: int) -> list[int]:
    base, extra = divmod(num_nodes, num_communities)
    return [base + (c < extra) for c in range(num_communities)]


def gen_sbm(num_nodes, num_communities, p_in, p_out, seed, node_features=None) -> Graph:
    """Stochastic block model with contiguous, near-equal communities.

    Pairs ``(i, j)``, ``i < j``, are visited in lexicographic order and each
    consumes exactly one uniform draw from ``numpy.random.default_rng(seed)``.
    """
    if num_communities < 1 or num_communities > num_nodes:
        raise GraphError(
            f"num_communities must be in [1, num_nodes], got {num_communities} for {num_nodes} nodes"
        )
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise GraphError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    labels = np.repeat(np.arange(num_communities), community_sizes(num_nodes, num_communities))
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    draws = rng.random(len(iu))
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = draws < prob
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    return Graph(num_nodes, edges, node_features=node_features, node_labels=labels)


def gen_sbm_cluster(num_nodes, num_communities, p_in, p_out, seed) -> Graph:
    """SBM graph where only one seed node per community carries its label.

    Features are one-hot of width ``num_communities + 1``: the seed of
    community ``c`` is hot at ``c + 1`` and every other node at 0. The seeds
    come from a stream separate from the edge draws.
    """
    g = gen_sbm(num_nodes, num_communities, p_in, p_out, seed)
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 1])
    x = np.zeros((num_nodes, num_communities + 1))
    x[:, 0] = 1.0
    for c in range(num_communities):
        s = rng.choice(np.flatnonzero(g.node_labels == c))
        x[s, 0] = 0.0
        x[s, c + 1] = 1.0
    return Graph(num_nodes, g.edges, node_features=x, node_labels=g.node_labels)


def sbm_cluster_dataset(num_train: int, num_val: int, num_test: int, num_nodes: int = 40,
                        num_communities: int = 4, p_in: float = 0.5, p_out: float = 0.05,
                        seed: int = 0) -> Dataset:
    """Node-classification corpus of ``gen_sbm_cluster`` graphs; graph ``i`` uses seed ``[seed, i]``."""
    total = num_train + num_val + num_test
    graphs = [gen_sbm_cluster(num_nodes, num_communities, p_in, p_out, [seed, i]) for i in range(total)]
    idx = list(range(total))
    split = {"train": idx[:num_train], "val": idx[num_train:num_train + num_val],
             "test": idx[num_train + num_val:]}
    return Dataset(graphs, "node-classification", split)


def gen_random_connected(num_nodes: int, p_extra: float = 0.3, seed=0) -> Graph:
    """Random recursive tree plus independent extra edges, with shuffled node ids."""
    if num_nodes < 1:
        raise GraphError(f"num_nodes must be positive, got {num_nodes}")
    rng = np.random.default_rng(seed)
    edges = {(int(rng.integers(i)), i) for i in range(1, num_nodes)}
    iu, ju = np.triu_indices(num_nodes, k=1)
    extra = rng.random(len(iu)) < p_extra
    edges |= set(zip(iu[extra].tolist(), ju[extra].tolist()))
    perm = rng.permutation(num_nodes)
    return Graph(num_nodes, [(perm[i], perm[j]) for i, j in sorted(edges)])


def gen_path(n: int) -> Graph:
    if n < 1:
        raise GraphError(f"path needs at least 1 node, got {n}")
    return Graph(n, [(i, i + 1) for i in range(n - 1)])


def gen_cycle(n: int) -> Graph:
    if n < 3:
        raise GraphError(f"cycle needs at least 3 nodes, got {n}")
    return Graph(n, [(i, (i + 1) % n) for i in range(n)])


def gen_complete(n: int) -> Graph:
    if n < 1:
        raise GraphError(f"complete graph needs at least 1 node, got {n}")
    return Graph(n, list(itertools.combinations(range(n), 2)))


def gen_ring_pair(n: int, m: int) -> Graph:
    """Cycles on ``0..n-1`` and ``n..n+m-1`` joined by the edge ``(n-1, n)``."""
    a, b = gen_cycle(n), gen_cycle(m)
    edges = list(a.edges) + [(i + n, j + n) for i, j in b.edges] + [(n - 1, n)]
    return Graph(n + m, edges)


def disjoint_union(*graphs: Graph) -> Graph:
    edges, offset = [], 0
    for g in graphs:
        edges += [(i + offset, j + offset) for i, j in g.edges]
        offset += g.num_nodes
    return Graph(offset, edges)


def enumerate_small_graphs(max_nodes: int, connected_only: bool = True) -> list[Graph]:
    """All graphs with at most ``max_nodes`` (<= 7) nodes, one per isomorphism class."""
    import networkx as nx

    if max_nodes > 7:
        raise GraphSizeError("the graph atlas covers at most 7 nodes")
    out = []
    for h in nx.graph_atlas_g():
        n = h.number_of_nodes()
        if n == 0 or n > max_nodes:
            continue
        if connected_only and not nx.is_connected(h):
            continue
        out.append(Graph(n, list(h.edges())))
    return out


# -- isomorphism oracle -------------------------------------------------------


def brute_force_isomorphic(g1: Graph, g2: Graph) -> bool:
    """Exhaustive isomorphism test by backtracking over node maps.

    Only graph-isomorphism invariants are used to prune (node/edge counts,
    degree of each mapped node), so the answer is exact.
    """
    for g in (g1, g2):
        if g.num_nodes > MAX_ISO_NODES:
            raise GraphSizeError(
                f"brute_force_isomorphic refuses graphs above {MAX_ISO_NODES} nodes (got {g.num_nodes})"
            )
    if g1.num_nodes != g2.num_nodes or g1.num_edges != g2.num_edges:
        return False
    d1, d2 = degree_vector(g1), degree_vector(g2)
    if sorted(d1.tolist()) != sorted(d2.tolist()):
        return False
    n = g1.num_nodes
    a1, a2 = g1.adjacency().astype(bool), g2.adjacency().astype(bool)
    # most constrained first
    order = sorted(range(n), key=lambda v: -d1[v])
    mapping = [-1] * n
    used = [False] * n

    def extend(pos: int) -> bool:
        if pos == n:
            return True
        u = order[pos]
        for v in range(n):
            if used[v] or d2[v] != d1[u]:
                continue
            if all(a1[u, order[q]] == a2[v, mapping[order[q]]] for q in range(pos)):
                mapping[u] = v
                used[v] = True
                if extend(pos + 1):
                    return True
                used[v] = False
        mapping[u] = -1
        return False

    return extend(0)
