"""Learned positional encodings from Laplacian eigenpairs.

Node-wise: each node sees the sequence ``(lambda_i, phi_i[j])`` over the m
lowest eigenpairs. Edge-wise: each node pair sees
``(lambda_i, |phi_i[j1] - phi_i[j2]|, phi_i[j1] * phi_i[j2])``, which does not
change when any eigenvector flips sign. Both run a small post-norm Transformer
encoder over the sequence and sum-pool the real (unmasked) positions.

All contractions here use ordered accumulation, so an m=8 run on a 5-node
graph matches the m=5 run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import EigSelection

NODE_INPUT_DIM = 2
EDGE_INPUT_DIM = 3


@dataclass
class LPEParams:
    kind: str  # "node" or "edge"
    m: int
    k: int
    n_layers: int
    n_heads: int
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("node", "edge"):
            raise ValueError(f"LPE kind must be 'node' or 'edge', got {self.kind!r}")
        if self.k % self.n_heads:
            raise ValueError(f"k={self.k} is not divisible by n_heads={self.n_heads}")

    @property
    def in_dim(self) -> int:
        return NODE_INPUT_DIM if self.kind == "node" else EDGE_INPUT_DIM

    def with_m(self, m: int) -> "LPEParams":
        """Same weights for a different maximum eigenpair count."""
        return replace(self, m=m)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_encoder(rng: np.random.Generator, width: int, n_layers: int, prefix: str = "") -> dict:
    t = {}
    for l in range(n_layers):
        p = f"{prefix}enc{l}."
        for name in ("q", "k", "v", "o"):
            t[p + "W" + name] = glorot(rng, width, width)
            t[p + "b" + name] = np.zeros(width)
        t[p + "W1"] = glorot(rng, width, 2 * width)
        t[p + "b1"] = np.zeros(2 * width)
        t[p + "W2"] = glorot(rng, 2 * width, width)
        t[p + "b2"] = np.zeros(width)
        for ln in ("ln1", "ln2"):
            t[p + ln + ".g"] = np.ones(width)
            t[p + ln + ".b"] = np.zeros(width)
    return t


def init_lpe_params(kind: str, m: int, k: int = 16, n_layers: int = 1, n_heads: int = 4,
                    rng: np.random.Generator | int = 0) -> LPEParams:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    in_dim = NODE_INPUT_DIM if kind == "node" else EDGE_INPUT_DIM
    raw = {"in.W": glorot(rng, in_dim, k), "in.b": np.zeros(k)}
    raw.update(init_encoder(rng, k, n_layers))
    tensors = {name: Tensor(v, requires_grad=True) for name, v in raw.items()}
    return LPEParams(kind, m, k, n_layers, n_heads, tensors)


def encoder_forward(x: Tensor, key_mask: np.ndarray, tensors: dict, n_layers: int, n_heads: int,
                    prefix: str = "") -> Tensor:
    """Post-norm self-attention encoder over axis 1 of ``x`` (S, m, w).

    ``key_mask`` (S, m) marks real positions; padded keys receive exactly zero
    attention weight.
    """
    s, m, w = x.shape
    dh = w // n_heads
    scale = 1.0 / math.sqrt(dh)
    blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (s, m, n_heads, dh)), (0, 2, 1, 3))

    for l in range(n_layers):
        p = f"{prefix}enc{l}."
        T = lambda name, p=p: tensors[p + name]
        q = heads(ad.linear(x, T("Wq"), T("bq"), ordered=True))
        k = heads(ad.linear(x, T("Wk"), T("bk"), ordered=True))
        v = heads(ad.linear(x, T("Wv"), T("bv"), ordered=True))
        prod = ad.reshape(q, (s, n_heads, m, 1, dh)) * ad.reshape(k, (s, n_heads, 1, m, dh))
        scores = ad.sum_(prod, axis=-1) * scale
        att = ad.softmax(ad.masked_fill(scores, blocked, -np.inf), axis=-1)
        mixed = ad.sum_(ad.reshape(att, (s, n_heads, m, m, 1)) * ad.reshape(v, (s, n_heads, 1, m, dh)), axis=3)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (s, m, w))
        x = ad.layer_norm(x + ad.linear(mixed, T("Wo"), T("bo"), ordered=True), T("ln1.g"), T("ln1.b"))
        ff = ad.linear(ad.relu(ad.linear(x, T("W1"), T("b1"), ordered=True)), T("W2"), T("b2"), ordered=True)
        x = ad.layer_norm(x + ff, T("ln2.g"), T("ln2.b"))
    return x


def encode_sequences(tokens: np.ndarray, key_mask: np.ndarray, params: LPEParams) -> Tensor:
    """Tokens (S, m, in_dim) -> pooled encodings (S, k)."""
    t = params.tensors
    x = ad.linear(Tensor(tokens), t["in.W"], t["in.b"], ordered=True)
    x = encoder_forward(x, key_mask, t, params.n_layers, params.n_heads)
    weights = np.asarray(key_mask, dtype=float)[:, :, None]
    return ad.sum_(x * weights, axis=1)


def _check_m(m: int, params: LPEParams) -> None:
    if m != params.m:
        raise ValueError(f"eigen selection has m={m} but LPE params expect m={params.m}")


def node_tokens(eigvals: np.ndarray, eigvecs: np.ndarray) -> np.ndarray:
    """(..., m) eigenvalues and (..., N, m) eigenvectors -> (..., N, m, 2)."""
    lam = np.broadcast_to(eigvals[..., None, :], eigvecs.shape)
    return np.stack([lam, eigvecs], axis=-1)


def node_lpe_forward(sel: EigSelection, params: LPEParams) -> Tensor:
    """Per-node positional encoding, shape (N, k); nodes form the batch axis."""
    _check_m(sel.m, params)
    tokens = node_tokens(sel.eigenvalues, sel.eigenvectors)
    mask = np.broadcast_to(sel.mask, (sel.num_nodes, sel.m))
    return encode_sequences(tokens, mask, params)


def node_lpe_batch(eigvals: np.ndarray, eigvecs: np.ndarray, eig_mask: np.ndarray, params: LPEParams) -> Tensor:
    """Batched variant: (B, m), (B, N, m), (B, m) -> (B, N, k)."""
    _check_m(eigvals.shape[-1], params)
    b, n, m = eigvecs.shape
    tokens = node_tokens(eigvals, eigvecs).reshape(b * n, m, NODE_INPUT_DIM)
    mask = np.broadcast_to(eig_mask[:, None, :], (b, n, m)).reshape(b * n, m)
    return ad.reshape(encode_sequences(tokens, mask, params), (b, n, params.k))


def pair_tokens(eigvals: np.ndarray, eigvecs: np.ndarray, j1, j2) -> np.ndarray:
    """Sign-invariant pair features (..., m, 3) for node index arrays ``j1``, ``j2``."""
    a, b = eigvecs[j1], eigvecs[j2]
    lam = np.broadcast_to(eigvals, a.shape)
    return np.stack([lam, np.abs(a - b), a * b], axis=-1)


def edge_lpe_features(sel: EigSelection, j1: int, j2: int) -> np.ndarray:
    n = sel.num_nodes
    if not (0 <= j1 < n and 0 <= j2 < n):
        raise IndexError(f"node pair ({j1}, {j2}) out of range for {n} nodes")
    return pair_tokens(sel.eigenvalues, sel.eigenvectors, j1, j2)


def edge_lpe_forward(sel: EigSelection, pairs, params: LPEParams) -> Tensor:
    """Pairwise positional encodings, shape (len(pairs), k). Cost is O(m^2) per pair."""
    _check_m(sel.m, params)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= sel.num_nodes):
        raise IndexError(f"node pair out of range for {sel.num_nodes} nodes")
    tokens = pair_tokens(sel.eigenvalues, sel.eigenvectors, pairs[:, 0], pairs[:, 1])
    mask = np.broadcast_to(sel.mask, (len(pairs), sel.m))
    return encode_sequences(tokens, mask, params)


def edge_lpe_batch(eigvals: np.ndarray, eigvecs: np.ndarray, eig_mask: np.ndarray, params: LPEParams) -> Tensor:
    """All ordered pairs of every graph: -> (B, N, N, k)."""
    _check_m(eigvals.shape[-1], params)
    b, n, m = eigvecs.shape
    a = eigvecs[:, :, None, :]
    c = eigvecs[:, None, :, :]
    lam = np.broadcast_to(eigvals[:, None, None, :], (b, n, n, m))
    tokens = np.stack([lam, np.abs(a - c), a * c], axis=-1).reshape(b * n * n, m, EDGE_INPUT_DIM)
    mask = np.broadcast_to(eig_mask[:, None, None, :], (b, n, n, m)).reshape(b * n * n, m)
    return ad.reshape(encode_sequences(tokens, mask, params), (b, n, n, params.k))
