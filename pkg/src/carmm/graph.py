"""Areal adjacency graphs and the spectral cache used by CAR log-densities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .errors import InvalidId, IsolatedArea, NotPositiveDefinite, SelfLoop

# eigenvalues this close to +-1 are snapped (connected/bipartite components)
_SNAP_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Binary, symmetric adjacency on ``n`` areas.

    Attributes
    ----------
    n : int
        Number of areas.
    edges : ndarray of shape (E, 2)
        Unique undirected edges, each stored as ``(i, j)`` with ``i < j``,
        sorted lexicographically.
    degrees : ndarray of shape (n,)
        Neighbour counts ``d_i``.
    car_eigenvalues : ndarray of shape (n,)
        Ascending eigenvalues of ``D^{-1/2} W D^{-1/2}``.
    sum_log_degrees : float
        ``sum(log d_i)``.
    adjacency : scipy.sparse.csr_matrix
        ``W`` as a CSR matrix of floats.
    """

    n: int
    edges: np.ndarray
    degrees: np.ndarray
    car_eigenvalues: np.ndarray
    sum_log_degrees: float
    adjacency: sp.csr_matrix

    @property
    def alpha_bounds(self) -> tuple[float, float]:
        """Open interval of ``alpha`` for which ``D - alpha W`` is positive definite."""
        lo = self.car_eigenvalues[0]
        hi = self.car_eigenvalues[-1]
        return (1.0 / lo if lo < 0 else -np.inf, 1.0 / hi if hi > 0 else np.inf)

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray()

    def neighbours(self, i: int) -> np.ndarray:
        W = self.adjacency
        return W.indices[W.indptr[i]:W.indptr[i + 1]]

    def precision(self, alpha: float, tau: float = 1.0) -> sp.csr_matrix:
        """Sparse CAR precision ``tau (D - alpha W)``."""
        return (tau * (sp.diags(self.degrees.astype(float)) - alpha * self.adjacency)).tocsr()


def build_graph(edge_list: Iterable[tuple[int, int]], n: int) -> SpatialGraph:
    """Build a :class:`SpatialGraph` from undirected edges.

    Duplicate pairs (in either orientation) are merged. Raises
    :class:`SelfLoop`, :class:`InvalidId` or :class:`IsolatedArea`.
    """
    n = int(n)
    if n < 1:
        raise InvalidId(f"graph needs at least one area, got n={n}")
    pairs = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        bad = (pairs < 0) | (pairs >= n)
        if bad.any():
            row = int(np.argmax(bad.any(axis=1)))
            raise InvalidId(f"edge {row} references area outside [0, {n}): {tuple(pairs[row])}")
        loops = pairs[:, 0] == pairs[:, 1]
        if loops.any():
            raise SelfLoop(int(pairs[np.argmax(loops), 0]))
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    edges = np.unique(np.column_stack([lo, hi]), axis=0) if len(pairs) else pairs

    degrees = np.bincount(edges.ravel(), minlength=n)
    if (degrees == 0).any():
        raise IsolatedArea(int(np.argmax(degrees == 0)))

    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    W = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    W.sort_indices()

    scale = 1.0 / np.sqrt(degrees)
    A = W.toarray() * scale[:, None] * scale[None, :]
    lam = np.linalg.eigvalsh(A)
    lam = np.clip(lam, -1.0, 1.0)
    lam[np.abs(lam - 1.0) < _SNAP_TOL] = 1.0
    lam[np.abs(lam + 1.0) < _SNAP_TOL] = -1.0

    for arr in (edges, degrees, lam):
        arr.setflags(write=False)
    return SpatialGraph(
        n=n,
        edges=edges,
        degrees=degrees,
        car_eigenvalues=lam,
        sum_log_degrees=float(np.log(degrees).sum()),
        adjacency=W,
    )


def car_logdet(graph: SpatialGraph, alpha: float, tau: float = 1.0) -> float:
    """``log det(tau (D - alpha W))`` from the cached eigenvalues."""
    factors = 1.0 - alpha * graph.car_eigenvalues
    if np.any(factors <= 0.0):
        raise NotPositiveDefinite(f"D - alpha W is not positive definite at alpha={alpha!r}")
    if tau <= 0:
        raise NotPositiveDefinite(f"tau must be positive, got {tau!r}")
    # unit-tau part first, so the tau term is added last and separates exactly
    base = graph.sum_log_degrees + float(np.log(factors).sum())
    return base + graph.n * float(np.log(tau))


def car_logdet_grad(graph: SpatialGraph, alpha: float) -> float:
    """Derivative of ``log det(D - alpha W)`` with respect to ``alpha``."""
    lam = graph.car_eigenvalues
    return float(-(lam / (1.0 - alpha * lam)).sum())
