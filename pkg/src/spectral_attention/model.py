"""Fully-connected graph Transformer with separate real-edge / added-edge attention.

Every ordered node pair ``(i, j)`` of a graph falls in exactly one branch:

* real: ``j`` is adjacent to ``i`` (plus ``i`` itself when
  ``self_loop_branch == "real"``), scored with ``Q1, K1, E1``;
* added: every other node of the same graph, scored with ``Q2, K2, E2``.

Logits are ``sum(Q h_i * K h_j * E e_ij) / sqrt(d_k)`` clamped to [-5, 5].
Each branch is softmax-normalized on its own and the two are mixed with
masses ``1/(1+gamma)`` and ``gamma/(1+gamma)``. A query whose branch is empty
gives the other branch the full mass, except that gamma = 0 always disables
the added branch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ordered_sum
from .graph import TASKS, Graph, gen_random_connected
from .lpe import LPEParams, edge_lpe_batch, glorot, init_encoder, node_lpe_batch
from .spectral import EigSelection, LaplacianKind, decompose_graph, select_eigpairs

LOGIT_CLAMP = 5.0


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 4
    H: int = 4
    d: int = 64
    k_lpe: int = 16
    m: int = 8
    gamma: float = 1.0
    readout: str = "mean"
    self_loop_branch: str = "real"
    lpe_kind: str = "node"
    attention: str = "full"
    lpe_layers: int = 1
    lpe_heads: int = 4
    laplacian: str = "combinatorial"
    task: str = "node-classification"
    in_dim: int = 1
    edge_dim: int = 1
    out_dim: int = 1

    def __post_init__(self):
        checks = [
            (self.d % self.H == 0, f"d={self.d} must be divisible by H={self.H}"),
            (self.gamma >= 0, f"gamma must be non-negative, got {self.gamma}"),
            (self.readout in ("mean", "sum"), f"readout must be 'mean' or 'sum', got {self.readout!r}"),
            (self.self_loop_branch in ("real", "added"), "self_loop_branch must be 'real' or 'added'"),
            (self.lpe_kind in ("node", "edge", "none"), "lpe_kind must be 'node', 'edge' or 'none'"),
            (self.attention in ("sparse", "full"), "attention must be 'sparse' or 'full'"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (self.lpe_kind != "node" or self.k_lpe < self.d, "k_lpe must be smaller than d with the node LPE"),
            (self.lpe_kind == "none" or self.k_lpe % self.lpe_heads == 0, "k_lpe must be divisible by lpe_heads"),
            (min(self.L, self.H, self.m, self.in_dim, self.edge_dim, self.out_dim) >= 1, "sizes must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        LaplacianKind(self.laplacian)

    @property
    def d_k(self) -> int:
        return self.d // self.H

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.attention == "sparse" else float(self.gamma)

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**blob)

    def to_dict(self) -> dict:
        return asdict(self)


# -- batching -----------------------------------------------------------------


@dataclass
class GraphBatch:
    """Graphs padded to a common node count; pairs never cross graphs."""

    x: np.ndarray  # (B, N, in_dim)
    node_mask: np.ndarray  # (B, N)
    real_mask: np.ndarray  # (B, N, N) pairs in the real branch
    added_mask: np.ndarray  # (B, N, N) pairs in the added branch
    self_real: np.ndarray  # (B, N, N) diagonal pairs routed through the real branch
    edge_index: tuple  # (b, i, j) arrays over directed real edges
    self_index: tuple  # (b, i) arrays of self pairs in the real branch
    edge_attr: np.ndarray  # (P, edge_dim)
    eigvals: np.ndarray  # (B, m)
    eigvecs: np.ndarray  # (B, N, m)
    eig_mask: np.ndarray  # (B, m)
    n_nodes: np.ndarray  # (B,)
    node_labels: Optional[np.ndarray] = None  # (B, N), -1 on padding
    graph_labels: Optional[np.ndarray] = None  # (B, out) or (B,)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def labels_for(self, task: str) -> np.ndarray:
        return self.node_labels if task == "node-classification" else self.graph_labels


def eigen_selection(g: Graph, cfg: ModelConfig) -> EigSelection:
    return select_eigpairs(decompose_graph(g, cfg.laplacian), cfg.m)


def collate(graphs: Sequence[Graph], selections: Sequence[EigSelection], cfg: ModelConfig) -> GraphBatch:
    b = len(graphs)
    n = max(g.num_nodes for g in graphs)
    m = cfg.m
    x = np.zeros((b, n, cfg.in_dim))
    node_mask = np.zeros((b, n), dtype=bool)
    adj = np.zeros((b, n, n), dtype=bool)
    eigvals = np.zeros((b, m))
    eigvecs = np.zeros((b, n, m))
    eig_mask = np.zeros((b, m), dtype=bool)
    eb, ei, ej, attrs = [], [], [], []
    for gi, (g, sel) in enumerate(zip(graphs, selections)):
        k = g.num_nodes
        feats = g.node_feature_matrix()
        if feats.shape[1] != cfg.in_dim:
            raise ConfigError(f"graph {gi} has node feature width {feats.shape[1]}, model expects {cfg.in_dim}")
        if sel.m != m:
            raise ConfigError(f"eigen selection for graph {gi} has m={sel.m}, model expects {m}")
        x[gi, :k] = feats
        node_mask[gi, :k] = True
        eigvals[gi] = sel.eigenvalues
        eigvecs[gi, :k] = sel.eigenvectors
        eig_mask[gi] = sel.mask
        ef = g.edge_feature_matrix()
        if g.num_edges and ef.shape[1] != cfg.edge_dim:
            raise ConfigError(f"graph {gi} has edge feature width {ef.shape[1]}, model expects {cfg.edge_dim}")
        for (i, j), row in zip(g.edges, ef):
            adj[gi, i, j] = adj[gi, j, i] = True
            eb += [gi, gi]
            ei += [i, j]
            ej += [j, i]
            attrs += [row, row]
    pair_valid = node_mask[:, :, None] & node_mask[:, None, :]
    diag = np.broadcast_to(np.eye(n, dtype=bool), (b, n, n)) & pair_valid
    self_real = diag if cfg.self_loop_branch == "real" else np.zeros_like(diag)
    real_mask = adj | self_real
    added_mask = pair_valid & ~real_mask
    # stable edge order: by graph, then query node, then key node
    order = np.lexsort((ej, ei, eb)) if eb else np.zeros(0, dtype=int)
    edge_index = tuple(np.asarray(v, dtype=int)[order] for v in (eb, ei, ej))
    edge_attr = np.asarray(attrs, dtype=float).reshape(-1, cfg.edge_dim)[order]

    node_labels = graph_labels = None
    if cfg.task == "node-classification" and all(g.node_labels is not None for g in graphs):
        node_labels = np.full((b, n), -1, dtype=np.int64)
        for gi, g in enumerate(graphs):
            node_labels[gi, : g.num_nodes] = g.node_labels
    elif cfg.task != "node-classification" and all(g.graph_label is not None for g in graphs):
        graph_labels = np.asarray([np.ravel(g.graph_label) for g in graphs], dtype=float)
    self_index = tuple(np.asarray(v, dtype=int) for v in np.nonzero(self_real.any(-1)))
    return GraphBatch(x, node_mask, real_mask, added_mask, self_real, edge_index, self_index, edge_attr,
                      eigvals, eigvecs, eig_mask, np.array([g.num_nodes for g in graphs]),
                      node_labels, graph_labels)


# -- parameters ---------------------------------------------------------------

BRANCH_PROJECTIONS = ("Q1", "K1", "E1", "Q2", "K2", "E2", "V")


def init_params(cfg: ModelConfig, seed=0) -> dict:
    """All learnable tensors in one flat, ordered ``{name: Tensor}`` mapping."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = cfg.d
    raw = {}
    h_dim = d - cfg.k_lpe if cfg.lpe_kind == "node" else d
    # embedding-table scale: a one-hot feature row maps to a unit-variance vector
    raw["node_embed.W"] = rng.normal(size=(cfg.in_dim, h_dim))
    raw["node_embed.b"] = np.zeros(h_dim)
    raw["edge_real.W"] = glorot(rng, cfg.edge_dim, d)
    raw["edge_real.b"] = np.zeros(d)
    raw["edge_self"] = rng.normal(scale=1.0 / math.sqrt(d), size=d)
    raw["edge_added"] = rng.normal(scale=1.0 / math.sqrt(d), size=d)
    if cfg.lpe_kind != "none":
        in_dim = 2 if cfg.lpe_kind == "node" else 3
        raw["lpe.in.W"] = glorot(rng, in_dim, cfg.k_lpe)
        raw["lpe.in.b"] = np.zeros(cfg.k_lpe)
        raw.update(init_encoder(rng, cfg.k_lpe, cfg.lpe_layers, prefix="lpe."))
    if cfg.lpe_kind == "edge":
        raw["edge_pe.W"] = glorot(rng, cfg.k_lpe, d)
        raw["edge_pe.b"] = np.zeros(d)
    for l in range(cfg.L):
        p = f"layer{l}."
        for name in BRANCH_PROJECTIONS + ("O",):
            raw[p + name + ".W"] = glorot(rng, d, d)
            raw[p + name + ".b"] = np.zeros(d)
        raw[p + "ffn1.W"] = glorot(rng, d, 2 * d)
        raw[p + "ffn1.b"] = np.zeros(2 * d)
        raw[p + "ffn2.W"] = glorot(rng, 2 * d, d)
        raw[p + "ffn2.b"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            raw[p + ln + ".g"] = np.ones(d)
            raw[p + ln + ".b"] = np.zeros(d)
    hidden = max(d // 2, 1)
    raw["head1.W"] = glorot(rng, d, hidden)
    raw["head1.b"] = np.zeros(hidden)
    raw["head2.W"] = glorot(rng, hidden, cfg.out_dim)
    raw["head2.b"] = np.zeros(cfg.out_dim)
    return {name: Tensor(v, requires_grad=True) for name, v in raw.items()}


def count_parameters(params: dict) -> int:
    return int(sum(t.size for t in params.values()))


def lpe_view(params: dict, cfg: ModelConfig) -> LPEParams:
    tensors = {name[4:]: t for name, t in params.items() if name.startswith("lpe.")}
    return LPEParams(cfg.lpe_kind, cfg.m, cfg.k_lpe, cfg.lpe_layers, cfg.lpe_heads, tensors)


# -- forward ------------------------------------------------------------------


def _lin(x, params, name) -> Tensor:
    return ad.linear(x, params[name + ".W"], params[name + ".b"])


def _heads(t: Tensor, cfg: ModelConfig) -> Tensor:
    b, n, _ = t.shape
    return ad.transpose(ad.reshape(t, (b, n, cfg.H, cfg.d_k)), (0, 2, 1, 3))


def embed_nodes(batch: GraphBatch, params: dict, cfg: ModelConfig) -> Tensor:
    """Initial node states: embedded features, concatenated with the node LPE if active."""
    h = _lin(Tensor(batch.x), params, "node_embed")
    if cfg.lpe_kind == "node":
        pe = node_lpe_batch(batch.eigvals, batch.eigvecs, batch.eig_mask, lpe_view(params, cfg))
        h = ad.concat([h, pe], axis=-1)
    return h


def edge_sources(batch: GraphBatch, params: dict) -> Tensor:
    """Embedded features of the directed real edges, (P, d)."""
    return _lin(Tensor(batch.edge_attr), params, "edge_real")


def edge_grid(batch: GraphBatch, params: dict, cfg: ModelConfig, real_emb: Tensor) -> Tensor:
    """Edge embeddings for every pair, (B, N, N, d); only used with the edge LPE."""
    b, n = batch.node_mask.shape
    d = cfg.d
    grid = ad.scatter(real_emb, batch.edge_index, (b, n, n, d))
    grid = grid + ad.reshape(params["edge_self"], (1, 1, 1, d)) * batch.self_real[..., None].astype(float)
    grid = grid + ad.reshape(params["edge_added"], (1, 1, 1, d)) * batch.added_mask[..., None].astype(float)
    pe = edge_lpe_batch(batch.eigvals, batch.eigvecs, batch.eig_mask, lpe_view(params, cfg))
    return grid + _lin(pe, params, "edge_pe")


def branch_coefficients(batch: GraphBatch, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-query masses of the real and added branches, each (B, 1, N, 1).

    With ``gamma == 0`` the added branch is switched off entirely, so a query
    without real pairs attends to nothing.
    """
    has_real = batch.real_mask.any(-1)
    has_added = batch.added_mask.any(-1) & (gamma > 0)
    both = has_real & has_added
    c_real = np.where(both, 1.0 / (1.0 + gamma), np.where(has_real, 1.0, 0.0))
    c_added = np.where(both, gamma / (1.0 + gamma), np.where(has_added, 1.0, 0.0))
    return c_real[:, None, :, None], c_added[:, None, :, None]


def _real_pair_terms(batch, params, cfg, l, real_emb):
    """``E1 e_ij`` for every real-branch pair as (P, H, d_k), plus the pairs' (b, i, j) index."""
    d, p = cfg.d, f"layer{l}."
    terms = _lin(real_emb, params, p + "E1")
    eb, ei, ej = batch.edge_index
    sb, si = batch.self_index
    if len(sb):
        e_self = _lin(ad.reshape(params["edge_self"], (1, d)), params, p + "E1")
        terms = ad.concat([terms, ad.broadcast_to(e_self, (len(sb), d))], axis=0)
        eb, ei, ej = np.concatenate([eb, sb]), np.concatenate([ei, si]), np.concatenate([ej, si])
    return ad.reshape(terms, (-1, cfg.H, cfg.d_k)), (eb, ei, ej)


def _dense_pair_logits(q1, k1, q2, k2, batch, params, cfg, l, grid) -> Tensor:
    """Unscaled logits from a full (B, N, N, d) edge grid (edge-LPE path)."""
    b, hk, n, dk = q1.shape
    p = f"layer{l}."

    def pairs(t):
        return ad.transpose(ad.reshape(t, (b, n, n, hk, dk)), (0, 3, 1, 2, 4))

    e1, e2 = pairs(_lin(grid, params, p + "E1")), pairs(_lin(grid, params, p + "E2"))
    s1 = ad.sum_(ad.reshape(q1, (b, hk, n, 1, dk)) * ad.reshape(k1, (b, hk, 1, n, dk)) * e1, axis=-1)
    s2 = ad.sum_(ad.reshape(q2, (b, hk, n, 1, dk)) * ad.reshape(k2, (b, hk, 1, n, dk)) * e2, axis=-1)
    return ad.where(batch.real_mask[:, None], s1, s2)


def attention_logits(h: Tensor, batch: GraphBatch, params: dict, cfg: ModelConfig, l: int,
                     real_emb: Tensor, grid: Optional[Tensor] = None) -> Tensor:
    """Clamped pair logits for layer ``l``, (B, H, N, N).

    Without a per-pair edge grid, the real branch is evaluated on its pair
    list and the added branch, whose edge embedding is shared, as a matmul.
    """
    b, n, _ = h.shape
    hk, dk, p = cfg.H, cfg.d_k, f"layer{l}."
    scale = 1.0 / math.sqrt(dk)
    q1, k1 = _heads(_lin(h, params, p + "Q1"), cfg), _heads(_lin(h, params, p + "K1"), cfg)
    q2, k2 = _heads(_lin(h, params, p + "Q2"), cfg), _heads(_lin(h, params, p + "K2"), cfg)
    if grid is not None:
        logits = _dense_pair_logits(q1, k1, q2, k2, batch, params, cfg, l, grid) * scale
    else:
        terms, (pb, pi, pj) = _real_pair_terms(batch, params, cfg, l, real_emb)
        qg = ad.getitem(q1, (pb, slice(None), pi))
        kg = ad.getitem(k1, (pb, slice(None), pj))
        real_vals = ad.sum_(qg * kg * terms, axis=-1) * scale
        real = ad.scatter(real_vals, (pb, slice(None), pi, pj), (b, hk, n, n))
        e2 = _lin(ad.reshape(params["edge_added"], (1, cfg.d)), params, p + "E2")
        added = ad.matmul(q2 * ad.reshape(e2, (1, hk, 1, dk)), ad.transpose(k2, (0, 1, 3, 2))) * scale
        logits = ad.where(batch.real_mask[:, None], real, added)
    return ad.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)


def attention_weights(logits: Tensor, batch: GraphBatch, gamma: float) -> Tensor:
    """Branch-wise softmax mixed by the gamma masses, (B, H, N, N)."""
    sm_real = ad.softmax(ad.masked_fill(logits, ~batch.real_mask[:, None], -np.inf), axis=-1)
    sm_added = ad.softmax(ad.masked_fill(logits, ~batch.added_mask[:, None], -np.inf), axis=-1)
    c_real, c_added = branch_coefficients(batch, gamma)
    return sm_real * c_real + sm_added * c_added


def _post_attention(h, mixed, params, cfg, l, training, rng, dropout) -> Tensor:
    p = f"layer{l}."
    att = ad.dropout(_lin(mixed, params, p + "O"), dropout, rng, training)
    h = ad.layer_norm(h + att, params[p + "ln1.g"], params[p + "ln1.b"])
    ff = _lin(ad.relu(_lin(h, params, p + "ffn1")), params, p + "ffn2")
    ff = ad.dropout(ff, dropout, rng, training)
    return ad.layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"])


def san_layer(h: Tensor, batch: GraphBatch, params: dict, cfg: ModelConfig, l: int, real_emb: Tensor,
              grid: Optional[Tensor] = None, training: bool = False, rng=None, dropout: float = 0.0):
    """One attention + FFN block; returns the new states and the attention weights."""
    b, n, _ = h.shape
    logits = attention_logits(h, batch, params, cfg, l, real_emb, grid)
    w = attention_weights(logits, batch, cfg.effective_gamma)
    v = _heads(_lin(h, params, f"layer{l}.V"), cfg)
    mixed = ad.ordered_bmm(w, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, cfg.d))
    return _post_attention(h, mixed, params, cfg, l, training, rng, dropout), w


def readout(h: Tensor, batch: GraphBatch, params: dict, cfg: ModelConfig) -> Tensor:
    if cfg.task != "node-classification":
        weights = batch.node_mask[..., None].astype(float)
        h = ad.sum_(h * weights, axis=1)
        if cfg.readout == "mean":
            h = h * (1.0 / batch.n_nodes[:, None].astype(float))
    return _lin(ad.relu(_lin(h, params, "head1")), params, "head2")


def san_forward(batch: GraphBatch, params: dict, cfg: ModelConfig, training: bool = False,
                rng: Optional[np.random.Generator] = None, dropout: float = 0.0,
                return_attention: bool = False):
    """Predictions: (B, N, out_dim) for node tasks, (B, out_dim) for graph tasks."""
    h = embed_nodes(batch, params, cfg)
    real_emb = edge_sources(batch, params)
    grid = edge_grid(batch, params, cfg, real_emb) if cfg.lpe_kind == "edge" else None
    attention = []
    for l in range(cfg.L):
        h, w = san_layer(h, batch, params, cfg, l, real_emb, grid, training, rng, dropout)
        attention.append(w.data)
    out = readout(h, batch, params, cfg)
    return (out, attention) if return_attention else out


def branch_masses(attention: Sequence[np.ndarray], batch: GraphBatch) -> tuple[np.ndarray, np.ndarray]:
    """Total attention mass each query puts on its real and added branches.

    Returns two arrays of shape (L, B, H, N).
    """
    w = np.stack(attention)
    real = ordered_sum(np.where(batch.real_mask[None, :, None], w, 0.0), axis=-1)
    added = ordered_sum(np.where(batch.added_mask[None, :, None], w, 0.0), axis=-1)
    return real, added


# -- sparse-only reference ----------------------------------------------------


def san_forward_sparse_reference(batch: GraphBatch, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Real-branch-only forward that never builds added pairs.

    Matches ``san_forward`` bit for bit when the effective gamma is 0. Only
    supports ``lpe_kind`` in {"node", "none"}.
    """
    if cfg.effective_gamma != 0.0:
        raise ConfigError("the sparse reference path requires gamma == 0 or sparse attention")
    if cfg.lpe_kind == "edge":
        raise ConfigError("the sparse reference path does not support the edge LPE")
    with ad.no_grad():
        h = embed_nodes(batch, params, cfg)
        real_emb = edge_sources(batch, params)
        b, n, _ = h.shape
        hk, dk, d = cfg.H, cfg.d_k, cfg.d
        scale = 1.0 / math.sqrt(dk)
        c_real, _ = branch_coefficients(batch, 0.0)
        eb, ei, ej = batch.edge_index
        for l in range(cfg.L):
            p = f"layer{l}."
            q1 = _heads(_lin(h, params, p + "Q1"), cfg).data
            k1 = _heads(_lin(h, params, p + "K1"), cfg).data
            v = _heads(_lin(h, params, p + "V"), cfg).data
            real_e1 = _lin(real_emb, params, p + "E1").data.reshape(-1, hk, dk)
            self_e1 = _lin(ad.reshape(params["edge_self"], (1, d)), params, p + "E1").data.reshape(hk, dk)
            mixed = np.zeros((b, hk, n, dk))
            for gb in range(b):
                for i in range(int(batch.n_nodes[gb])):
                    terms = {int(ej[e]): real_e1[e] for e in np.flatnonzero((eb == gb) & (ei == i))}
                    if batch.self_real[gb, i, i]:
                        terms[i] = self_e1
                    if not terms:
                        continue
                    keys = sorted(terms)
                    prods = np.stack([(q1[gb, :, i] * k1[gb, :, j]) * terms[j] for j in keys], axis=1)
                    logits = np.clip(ordered_sum(prods, axis=-1) * scale, -LOGIT_CLAMP, LOGIT_CLAMP)
                    e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
                    wts = e / ordered_sum(e, axis=-1, keepdims=True) * c_real[gb, 0, i, 0]
                    acc = wts[:, 0:1] * v[gb, :, keys[0]]
                    for t, j in enumerate(keys[1:], start=1):
                        acc = acc + wts[:, t:t + 1] * v[gb, :, j]
                    mixed[gb, :, i] = acc
            mixed_t = Tensor(mixed.transpose(0, 2, 1, 3).reshape(b, n, d))
            h = _post_attention(h, mixed_t, params, cfg, l, False, None, 0.0)
        return readout(h, batch, params, cfg).data


# -- gradient check -----------------------------------------------------------


def gradcheck_model(cfg: ModelConfig, n_nodes: int = 6, seed: int = 0, max_coords: Optional[int] = 20,
                    eps: float = 1e-5, tol: float = 1e-5) -> ad.GradcheckReport:
    """Finite-difference check of every parameter tensor of the full forward.

    Uses one random connected graph with random node and edge features and a
    random linear functional of the outputs as the scalar loss.
    """
    rng = np.random.default_rng(seed)
    g = gen_random_connected(n_nodes, 0.3, rng)
    g = Graph(n_nodes, g.edges, node_features=rng.normal(size=(n_nodes, cfg.in_dim)),
              edge_features=rng.normal(size=(g.num_edges, cfg.edge_dim)))
    batch = collate([g], [eigen_selection(g, cfg)], cfg)
    params = init_params(cfg, rng)
    out_shape = san_forward(batch, params, cfg).shape
    weights = rng.normal(size=out_shape)
    return ad.gradcheck(lambda: ad.sum_(san_forward(batch, params, cfg) * weights), params,
                        eps=eps, tol=tol, max_coords=max_coords, seed=seed)
