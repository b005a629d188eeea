"""Laplacians, eigendecomposition bookkeeping and spectral node distances.

Zero modes are eigenvalues below ``ZERO_TOL * max(1, lambda_max)``; every
spectral sum below skips all of them, which reduces to skipping the single
constant mode on connected graphs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .graph import Graph, GraphError, degree_vector

ZERO_TOL = 1e-8
SYMMETRY_TOL = 1e-10
DEFAULT_TOL_MULT = 1e-6
# entries below this magnitude never decide an eigenvector's sign
SIGN_TOL = 1e-10


class LaplacianKind(enum.Enum):
    COMBINATORIAL = "combinatorial"
    SYMMETRIC_NORMALIZED = "symmetric-normalized"


def _kind(kind) -> LaplacianKind:
    return kind if isinstance(kind, LaplacianKind) else LaplacianKind(kind)


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    kind: LaplacianKind
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]
    multiplicity_groups: tuple
    num_zero_modes: int

    @property
    def num_nodes(self) -> int:
        return self.eigenvectors.shape[0]

    def nonzero_modes(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.num_zero_modes
        return self.eigenvalues[k:], self.eigenvectors[:, k:]

    def reconstruct(self) -> np.ndarray:
        phi = self.eigenvectors
        return (phi * self.eigenvalues) @ phi.T


@dataclass(frozen=True, eq=False)
class EigSelection:
    """The ``m`` lowest eigenpairs, zero-padded and masked when ``m > N``."""

    eigenvalues: np.ndarray  # (m,)
    eigenvectors: np.ndarray  # (N, m)
    mask: np.ndarray  # (m,) True where real

    @property
    def m(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.eigenvectors.shape[0]


def laplacian(g: Graph, kind=LaplacianKind.COMBINATORIAL) -> np.ndarray:
    """``D - A`` or ``D^-1/2 (D - A) D^-1/2``; isolated nodes get zero rows."""
    kind = _kind(kind)
    a = g.adjacency()
    deg = degree_vector(g).astype(float)
    lap = np.diag(deg) - a
    if kind is LaplacianKind.COMBINATORIAL:
        return lap
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return inv_sqrt[:, None] * lap * inv_sqrt[None, :]


def canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the first entry above ``SIGN_TOL`` in magnitude is positive."""
    out = np.array(vectors, dtype=float)
    for c in range(out.shape[1]):
        big = np.flatnonzero(np.abs(out[:, c]) > SIGN_TOL)
        if big.size and out[big[0], c] < 0:
            out[:, c] = -out[:, c]
    return out


def _groups(values: np.ndarray, tol: float) -> tuple:
    groups, current = [], [0]
    for i in range(1, len(values)):
        if values[i] - values[current[0]] <= tol:
            current.append(i)
        else:
            groups.append(tuple(current))
            current = [i]
    groups.append(tuple(current))
    return tuple(groups)


def eigendecompose(lap, tol_mult: float = DEFAULT_TOL_MULT, kind=LaplacianKind.COMBINATORIAL) -> SpectralDecomposition:
    """Dense symmetric eigendecomposition with L2-normalized, sign-canonical vectors.

    Eigenvalues within ``tol_mult * max(1, lambda_max)`` of the first member of
    a run are grouped as one multiplicity class.
    """
    lap = np.asarray(lap, dtype=float)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise GraphError(f"Laplacian must be square, got shape {lap.shape}")
    asym = np.max(np.abs(lap - lap.T)) if lap.size else 0.0
    if asym > SYMMETRY_TOL:
        raise GraphError(f"matrix is not symmetric (max |L - L^T| = {asym:.3g})")
    values, vectors = np.linalg.eigh(lap)
    vectors = vectors / np.linalg.norm(vectors, axis=0, keepdims=True)
    vectors = canonicalize_signs(vectors)
    scale = max(1.0, float(values[-1]))
    zero_modes = int(np.sum(values < ZERO_TOL * scale))
    return SpectralDecomposition(
        kind=_kind(kind),
        eigenvalues=values,
        eigenvectors=vectors,
        multiplicity_groups=_groups(values, tol_mult * scale),
        num_zero_modes=zero_modes,
    )


def decompose_graph(g: Graph, kind=LaplacianKind.COMBINATORIAL, tol_mult: float = DEFAULT_TOL_MULT) -> SpectralDecomposition:
    return eigendecompose(laplacian(g, kind), tol_mult, kind)


def select_eigpairs(sd: SpectralDecomposition, m: int) -> EigSelection:
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    n = sd.num_nodes
    r = min(m, n)
    values = np.zeros(m)
    vectors = np.zeros((n, m))
    values[:r] = sd.eigenvalues[:r]
    vectors[:, :r] = sd.eigenvectors[:, :r]
    mask = np.arange(m) < r
    return EigSelection(values, vectors, mask)


def random_sign_flip(sel: EigSelection, seed) -> EigSelection:
    """Multiply each real eigenvector by an independent fair +-1."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    signs = np.where(rng.random(sel.m) < 0.5, -1.0, 1.0)
    signs[~sel.mask] = 1.0
    return EigSelection(sel.eigenvalues.copy(), sel.eigenvectors * signs, sel.mask.copy())


# -- physical quantities ------------------------------------------------------


def _check_nodes(g: Graph, *nodes) -> None:
    for j in nodes:
        if not 0 <= int(j) < g.num_nodes:
            raise IndexError(f"node {j} out of range for a graph with {g.num_nodes} nodes")


def greens_function(g: Graph, as_written: bool = False) -> np.ndarray:
    """Electric-potential Green's function from the normalized spectrum.

    ``as_written=False`` gives ``D^1/2 L_sym^+ D^-1/2``. ``as_written=True``
    squares each eigenvector product before dividing by the eigenvalue.
    """
    deg = degree_vector(g).astype(float)
    if np.any(deg == 0):
        raise GraphError("Green's function needs every node to have positive degree")
    sd = decompose_graph(g, LaplacianKind.SYMMETRIC_NORMALIZED)
    lam, phi = sd.nonzero_modes()
    if as_written:
        core = np.einsum("ai,bi->ab", phi**2 / lam, phi**2)
    else:
        core = (phi / lam) @ phi.T
    return np.sqrt(deg)[:, None] * core / np.sqrt(deg)[None, :]


def diffusion_distance_sq(g: Graph, j1: int, j2: int, t: float, sd: SpectralDecomposition | None = None) -> float:
    _check_nodes(g, j1, j2)
    if t <= 0:
        raise ValueError(f"diffusion time must be positive, got {t}")
    sd = sd or decompose_graph(g)
    lam, phi = sd.nonzero_modes()
    diff = phi[j1] - phi[j2]
    return float(np.sum(np.exp(-2.0 * t * lam) * diff**2))


def biharmonic_distance_sq(g: Graph, j1: int, j2: int, sd: SpectralDecomposition | None = None) -> float:
    _check_nodes(g, j1, j2)
    sd = sd or decompose_graph(g)
    lam, phi = sd.nonzero_modes()
    diff = phi[j1] - phi[j2]
    return float(np.sum(diff**2 / lam**2))


def diffusion_distance_matrix(g: Graph, t: float) -> np.ndarray:
    sd = decompose_graph(g)
    n = g.num_nodes
    return np.array([[diffusion_distance_sq(g, a, b, t, sd) for b in range(n)] for a in range(n)])


def biharmonic_distance_matrix(g: Graph) -> np.ndarray:
    sd = decompose_graph(g)
    n = g.num_nodes
    return np.array([[biharmonic_distance_sq(g, a, b, sd) for b in range(n)] for a in range(n)])


def heat_kernel_oracle(g: Graph, t: float) -> np.ndarray:
    """``exp(-t L)`` of the combinatorial Laplacian by Pade scaling-and-squaring."""
    return expm(-t * laplacian(g))
