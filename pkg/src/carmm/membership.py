"""Multiple-membership weights mapping areas onto membership units."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, EmptyRow, InvalidId, NegativeWeight, RowSumViolation

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MembershipMatrix:
    """Row-stochastic ``m x n`` weight matrix ``h_{i|j}``."""

    m: int
    n: int
    weights: sp.csr_matrix

    def dense(self) -> np.ndarray:
        return self.weights.toarray()

    def support(self, j: int) -> np.ndarray:
        W = self.weights
        return W.indices[W.indptr[j]:W.indptr[j + 1]]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()

    def triplets(self) -> list[tuple[int, int, float]]:
        coo = self.weights.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[k]), int(coo.col[k]), float(coo.data[k])) for k in order]


def build_membership(
    triplets: Iterable[tuple[int, int, float]],
    m: int,
    n: int,
    renormalize: bool = False,
) -> MembershipMatrix:
    """Assemble a :class:`MembershipMatrix` from ``(membership, area, weight)`` rows.

    Duplicate ``(membership, area)`` rows are summed. With ``renormalize``
    each row is divided by its total; otherwise rows must already sum to one.
    """
    rows, cols, vals = [], [], []
    for j, i, w in triplets:
        rows.append(int(j))
        cols.append(int(i))
        vals.append(float(w))
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if len(rows) and (rows.min() < 0 or rows.max() >= m):
        raise InvalidId(f"membership id outside [0, {m})")
    if len(cols) and (cols.min() < 0 or cols.max() >= n):
        raise InvalidId(f"area id outside [0, {n})")
    if (vals < 0).any() or not np.isfinite(vals).all():
        k = int(np.argmax((vals < 0) | ~np.isfinite(vals)))
        raise NegativeWeight(f"weight {vals[k]!r} for membership {rows[k]}, area {cols[k]}")

    H = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))  # sums duplicates
    H.eliminate_zeros()
    H.sort_indices()
    totals = np.asarray(H.sum(axis=1)).ravel()
    empty = np.flatnonzero(totals <= 0)
    if len(empty):
        raise EmptyRow(int(empty[0]))
    if renormalize:
        H = sp.diags(1.0 / totals) @ H
        H = H.tocsr()
        H.sort_indices()
    else:
        off = np.flatnonzero(np.abs(totals - 1.0) > ROW_SUM_TOL)
        if len(off):
            raise RowSumViolation(int(off[0]), float(totals[off[0]]))
    return MembershipMatrix(m=int(m), n=int(n), weights=H)


def mm_project(H: MembershipMatrix, zeta: np.ndarray) -> np.ndarray:
    """Weighted average of areal values for each membership.

    ``zeta`` may be a single vector of length ``n`` or an array of draws with
    areas on the last axis.
    """
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape[-1] != H.n:
        raise DimensionMismatch(f"expected {H.n} areal values, got {zeta.shape[-1]}")
    if zeta.ndim == 1:
        return H.weights @ zeta
    flat = zeta.reshape(-1, H.n)
    return (H.weights @ flat.T).T.reshape(zeta.shape[:-1] + (H.m,))
