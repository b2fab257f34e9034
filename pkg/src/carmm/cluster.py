"""Exceedance-probability risk clustering (area vs locality, and bivariate)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, LengthMismatch
from .graph import SpatialGraph

CATEGORIES = ("HH", "HL", "LH", "LL")
OUTCOME_TAGS = ("M", "P")


def exceedance_prob(rho_draws, threshold: float = 1.0) -> np.ndarray:
    """Share of draws strictly above ``threshold``, per area."""
    rho = np.asarray(rho_draws, dtype=float)
    if rho.ndim == 1:
        rho = rho[:, None]
    return (rho > threshold).mean(axis=0)


def locality_risk(rho_draws, graph: SpatialGraph) -> np.ndarray:
    """Per draw, the mean risk over each area's neighbours (the area itself excluded)."""
    rho = np.asarray(rho_draws, dtype=float)
    if rho.shape[-1] != graph.n:
        raise DimensionMismatch(f"draws cover {rho.shape[-1]} areas, graph has {graph.n}")
    flat = rho.reshape(-1, graph.n)
    out = (graph.adjacency @ flat.T).T / graph.degrees
    return out.reshape(rho.shape)


def classify(p_area, p_locality, prob_threshold: float = 0.9) -> np.ndarray:
    """HH / HL / LH / LL from the area and locality exceedance probabilities."""
    a = np.asarray(p_area) > prob_threshold
    b = np.asarray(p_locality) > prob_threshold
    if a.shape != b.shape:
        raise LengthMismatch("area and locality probabilities differ in length")
    out = np.full(a.shape, "LL", dtype="<U2")
    out[a & b] = "HH"
    out[a & ~b] = "HL"
    out[~a & b] = "LH"
    return out


def bivariate_classify(categories_1, categories_2):
    """Combine the two outcomes' categories.

    Returns ``(cells, collapsed)``: the 16-way label ``"HL/LL"`` and the
    within-area label such as ``"M:H-P:L"`` built from each outcome's own
    area-level letter.
    """
    c1 = np.asarray(categories_1)
    c2 = np.asarray(categories_2)
    if c1.shape != c2.shape:
        raise LengthMismatch("category vectors differ in length")
    cells = np.array([f"{a}/{b}" for a, b in zip(c1, c2)], dtype=object)
    collapsed = np.array(
        [f"{OUTCOME_TAGS[0]}:{a[0]}-{OUTCOME_TAGS[1]}:{b[0]}" for a, b in zip(c1, c2)], dtype=object
    )
    return cells, collapsed


def cross_tab(categories_1, categories_2) -> np.ndarray:
    """4 x 4 counts, rows outcome 1 and columns outcome 2 in ``CATEGORIES`` order."""
    idx = {c: k for k, c in enumerate(CATEGORIES)}
    table = np.zeros((4, 4), dtype=np.int64)
    for a, b in zip(categories_1, categories_2):
        table[idx[a], idx[b]] += 1
    return table


def category_counts(categories) -> dict[str, int]:
    cats = list(categories)
    return {c: cats.count(c) for c in CATEGORIES}


@dataclass(frozen=True, eq=False)
class ClusterReport:
    """Per-outcome probabilities and categories, plus the bivariate labels.

    Outcome arrays are stacked with outcome 1 (areal) first.
    """

    p_area: np.ndarray
    p_locality: np.ndarray
    categories: np.ndarray
    cells: np.ndarray
    collapsed: np.ndarray
    risk_threshold: float
    prob_threshold: float

    @property
    def table(self) -> np.ndarray:
        return cross_tab(self.categories[0], self.categories[1])


def cluster_draws(rho1_draws, rho2_draws, graph: SpatialGraph, risk_threshold=1.0, prob_threshold=0.9) -> ClusterReport:
    p_area, p_loc, cats = [], [], []
    for rho in (rho1_draws, rho2_draws):
        pa = exceedance_prob(rho, risk_threshold)
        pl = exceedance_prob(locality_risk(rho, graph), risk_threshold)
        p_area.append(pa)
        p_loc.append(pl)
        cats.append(classify(pa, pl, prob_threshold))
    cells, collapsed = bivariate_classify(cats[0], cats[1])
    return ClusterReport(
        np.stack(p_area), np.stack(p_loc), np.stack(cats), cells, collapsed,
        float(risk_threshold), float(prob_threshold),
    )


def cluster_report(samples, graph: SpatialGraph, risk_threshold=1.0, prob_threshold=0.9) -> ClusterReport:
    """Cluster areas using areal risk draws for outcome 1 and ``exp(zeta2)`` for outcome 2."""
    return cluster_draws(
        samples.flat(samples.rho1), samples.flat(samples.zeta2_risk), graph, risk_threshold, prob_threshold
    )
