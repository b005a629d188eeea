"""1-WL color refinement versus Laplacian spectra as graph discriminators."""

from __future__ import annotations

import csv
import io
import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, GraphSizeError, MAX_ISO_NODES, brute_force_isomorphic, disjoint_union
from .spectral import decompose_graph

DEFAULT_SPECTRAL_TOL = 1e-6


@dataclass(frozen=True)
class WLColoring:
    colors: tuple
    rounds_to_stabilize: int
    histogram: tuple  # sorted (color, count) pairs
    history: tuple = ()  # colors after each round, starting with the initial ones


def _initial_colors(g: Graph) -> list:
    if g.node_features is None:
        return [0] * g.num_nodes
    rows = [tuple(r) for r in g.node_features.tolist()]
    table = {sig: c for c, sig in enumerate(sorted(set(rows)))}
    return [table[r] for r in rows]


def _refine(adj: list, colors: list) -> list:
    sigs = [(colors[v], tuple(sorted(colors[u] for u in adj[v]))) for v in range(len(adj))]
    # ids are ranks of the signatures, so they do not depend on node order
    table = {sig: c for c, sig in enumerate(sorted(set(sigs)))}
    return [table[s] for s in sigs]


def _num_classes(colors) -> int:
    return len(set(colors))


def wl1_refine(g: Graph, max_rounds: Optional[int] = None) -> WLColoring:
    """Refine colors until the partition stops splitting (or ``max_rounds``)."""
    adj = [[] for _ in range(g.num_nodes)]
    for i, j in g.edges:
        adj[i].append(j)
        adj[j].append(i)
    colors = _initial_colors(g)
    history = [tuple(colors)]
    limit = g.num_nodes if max_rounds is None else max_rounds
    rounds = 0
    while rounds < limit:
        new = _refine(adj, colors)
        if _num_classes(new) == _num_classes(colors):
            # the new partition refines the old one, so equal class counts mean stable
            colors = new
            break
        colors = new
        rounds += 1
        history.append(tuple(colors))
    hist = tuple(sorted(Counter(colors).items()))
    return WLColoring(tuple(colors), rounds, hist, tuple(history))


def wl1_distinguishes(g1: Graph, g2: Graph) -> bool:
    """Refine on the disjoint union so both graphs share one color vocabulary."""
    if g1.num_nodes != g2.num_nodes:
        return True
    union = disjoint_union(g1, g2)
    if g1.node_features is not None or g2.node_features is not None:
        x = np.vstack([g1.node_feature_matrix(), g2.node_feature_matrix()])
        union = Graph(union.num_nodes, union.edges, node_features=x)
    colors = wl1_refine(union).colors
    n = g1.num_nodes
    return Counter(colors[:n]) != Counter(colors[n:])


def spectra_distinguish(g1: Graph, g2: Graph, tol: float = DEFAULT_SPECTRAL_TOL) -> bool:
    if g1.num_nodes != g2.num_nodes:
        return True
    ev1 = decompose_graph(g1).eigenvalues
    ev2 = decompose_graph(g2).eigenvalues
    return bool(np.any(np.abs(ev1 - ev2) > tol))


@dataclass(frozen=True)
class PairRow:
    g1: str
    g2: str
    isomorphic: bool
    wl1_distinct: bool
    spectra_distinct: bool


@dataclass(frozen=True)
class DiscriminationReport:
    rows: tuple

    @property
    def wl_blind_spectra_distinct(self) -> int:
        """Non-isomorphic pairs that 1-WL misses but the spectrum separates."""
        return sum(not r.isomorphic and not r.wl1_distinct and r.spectra_distinct for r in self.rows)

    @property
    def unsound(self) -> int:
        """Isomorphic pairs that either test claims to separate (must be 0)."""
        return sum(r.isomorphic and (r.wl1_distinct or r.spectra_distinct) for r in self.rows)

    @property
    def isospectral_non_isomorphic(self) -> int:
        return sum(not r.isomorphic and not r.spectra_distinct for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["g1", "g2", "isomorphic", "wl1_distinct", "spectra_distinct"])
        for r in self.rows:
            w.writerow([r.g1, r.g2, str(r.isomorphic).lower(), str(r.wl1_distinct).lower(),
                        str(r.spectra_distinct).lower()])
        return buf.getvalue()


def discrimination_report(corpus: Sequence[Graph], names: Optional[Sequence[str]] = None,
                          tol: float = DEFAULT_SPECTRAL_TOL) -> DiscriminationReport:
    """Compare every unordered pair with the isomorphism oracle, 1-WL and spectra."""
    for g in corpus:
        if g.num_nodes > MAX_ISO_NODES:
            raise GraphSizeError(f"discrimination_report needs graphs of at most {MAX_ISO_NODES} nodes")
    names = list(names) if names is not None else [str(i) for i in range(len(corpus))]
    spectra = [decompose_graph(g).eigenvalues for g in corpus]
    rows = []
    for a, b in itertools.combinations(range(len(corpus)), 2):
        g1, g2 = corpus[a], corpus[b]
        if g1.num_nodes != g2.num_nodes:
            spec = True
        else:
            spec = bool(np.any(np.abs(spectra[a] - spectra[b]) > tol))
        rows.append(PairRow(names[a], names[b], brute_force_isomorphic(g1, g2),
                            wl1_distinguishes(g1, g2), spec))
    return DiscriminationReport(tuple(rows))
