"""Synthetic lattices, memberships and datasets at known parameter values."""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, ValidationError
from .graph import SpatialGraph, build_graph
from .membership import MembershipMatrix, build_membership, mm_project
from .model import Dataset, ModelSpec, ParameterState, preprocess_covariates


@dataclass(frozen=True)
class TruthSpec:
    """Generating values for every scalar parameter."""

    prior_kind: str = "gmcar"
    alpha1: float = 0.40
    alpha2: float = 0.90
    tau1: float = 6.0
    tau2: float = 4.0
    eta0: float = 0.30
    eta1: float = 0.50
    gamma1: float = 0.50
    gamma2: float = 1.30
    psi1: float = 20.0
    psi2: float = 10.0
    beta1: tuple = ()
    beta2: tuple = ()

    @property
    def use_covariates(self) -> bool:
        return len(self.beta1) > 0

    def scalar_values(self) -> dict[str, float]:
        """Truths keyed by the names used in posterior summaries."""
        out = {}
        if self.prior_kind == "mcar":
            out["alpha"] = self.alpha1
        else:
            out["alpha1"] = self.alpha1
            out["alpha2"] = self.alpha2
        out.update(tau1=self.tau1, tau2=self.tau2, eta0=self.eta0)
        if self.prior_kind == "gmcar":
            out["eta1"] = self.eta1
        out.update(gamma1=self.gamma1, gamma2=self.gamma2)
        for k, b in enumerate(self.beta1):
            out[f"beta1[{k + 1}]"] = b
        for k, b in enumerate(self.beta2):
            out[f"beta2[{k + 1}]"] = b
        out.update(psi1=self.psi1, psi2=self.psi2)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta1"] = list(self.beta1)
        d["beta2"] = list(self.beta2)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        d = dict(d)
        d["beta1"] = tuple(d.get("beta1", ()))
        d["beta2"] = tuple(d.get("beta2", ()))
        return cls(**d)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(prior_kind=self.prior_kind, use_covariates=self.use_covariates)


def study_truth(prior_kind: str = "gmcar", covariates: bool = False) -> TruthSpec:
    """Truth values of the simulation study (one of the four scenarios)."""
    if prior_kind not in ("gmcar", "mcar"):
        raise ValidationError(f"unknown prior kind {prior_kind!r}")
    mcar = prior_kind == "mcar"
    if not covariates:
        return TruthSpec(
            prior_kind=prior_kind,
            alpha1=0.40, alpha2=0.40 if mcar else 0.90,
            eta1=0.0 if mcar else 0.50,
        )
    return TruthSpec(
        prior_kind=prior_kind,
        alpha1=0.40, alpha2=0.40 if mcar else 0.20,
        eta1=0.0 if mcar else 0.50,
        gamma1=-0.30, gamma2=-0.50,
        beta1=(0.3, 0.5), beta2=(1.0, 1.0),
    )


def make_lattice(rows: int, cols: int) -> SpatialGraph:
    """Rook-adjacency grid; area ``r * cols + c``."""
    if rows * cols < 2:
        raise ValidationError("lattice needs at least two cells")
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return build_graph(edges, rows * cols)


def make_membership(
    m: int,
    graph: SpatialGraph,
    sparsity: float,
    rng: np.random.Generator,
    concentration: float = 1.0,
) -> MembershipMatrix:
    """Random catchments: each membership draws weights over a compact set of areas.

    The support size is ``1 + Binomial(n - 1, (sparsity - 1) / (n - 1))`` so
    its mean equals ``sparsity``. Areas are taken in breadth-first order from
    a random centre (random tie-breaking) and weighted by a symmetric
    Dirichlet.
    """
    if m < 1:
        raise ValidationError("need at least one membership")
    n = graph.n
    if not 1 <= sparsity <= n:
        raise ValidationError(f"sparsity must lie in [1, {n}]")
    prob = 0.0 if n == 1 else (sparsity - 1.0) / (n - 1.0)
    triplets = []
    for j in range(m):
        k = 1 + int(rng.binomial(n - 1, prob)) if n > 1 else 1
        centre = int(rng.integers(n))
        order = _bfs_order(graph, centre, rng)
        areas = order[:k]
        w = rng.dirichlet(np.full(k, concentration)) if k > 1 else np.ones(1)
        triplets.extend((j, int(i), float(wi)) for i, wi in zip(areas, w))
    return build_membership(triplets, m, n, renormalize=True)


def _bfs_order(graph: SpatialGraph, start: int, rng: np.random.Generator) -> list[int]:
    seen = {start}
    order = [start]
    queue = deque([start])
    while queue:
        i = queue.popleft()
        nbrs = list(graph.neighbours(i))
        rng.shuffle(nbrs)
        for j in nbrs:
            if j not in seen:
                seen.add(j)
                order.append(int(j))
                queue.append(j)
    rest = [i for i in rng.permutation(graph.n) if i not in seen]
    return order + [int(i) for i in rest]


def draw_offsets(size: int, rng: np.random.Generator, low: float = 5.0, high: float = 50.0) -> np.ndarray:
    """Log-uniform expected counts on ``[low, high]``."""
    return np.exp(rng.uniform(np.log(low), np.log(high), size))


def sample_gmrf(graph: SpatialGraph, alpha: float, tau: float, rng: np.random.Generator, size: Optional[int] = None):
    """Exact draws from ``N(0, [tau (D - alpha W)]^{-1})`` via Cholesky."""
    Q = graph.precision(alpha, tau).toarray()
    try:
        L = cholesky(Q, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"CAR precision not positive definite at alpha={alpha!r}") from exc
    shape = (graph.n,) if size is None else (graph.n, size)
    x = solve_triangular(L.T, rng.standard_normal(shape), lower=False)
    return x if size is None else x.T


def sample_gmcar(graph, alpha1, alpha2, eta0, eta1, tau1, tau2, rng, size=None):
    """Draw ``(phi1, phi2)`` from the GMCAR prior by composition."""
    phi2 = sample_gmrf(graph, alpha2, tau2, rng, size)
    eps = sample_gmrf(graph, alpha1, tau1, rng, size)
    W = graph.adjacency
    mean = eta0 * phi2 + eta1 * (phi2 @ W if phi2.ndim == 2 else W @ phi2)
    return mean + eps, phi2


def negbin_draw(mu, psi, rng: np.random.Generator):
    mu = np.asarray(mu, dtype=float)
    return rng.negative_binomial(psi, psi / (psi + mu))


def generate_dataset(
    truth: TruthSpec,
    graph: SpatialGraph,
    H: MembershipMatrix,
    X: Optional[np.ndarray],
    E1: np.ndarray,
    E2: np.ndarray,
    rng: np.random.Generator,
) -> tuple[Dataset, ParameterState]:
    """Simulate counts from the full model; returns the data and the generating state.

    Covariate effects act on min-max normalised columns of ``X``.
    """
    n = graph.n
    if H.n != n or len(E1) != n or len(E2) != H.m:
        raise DimensionMismatch("graph, membership and offsets disagree on sizes")
    phi1, phi2 = sample_gmcar(
        graph, truth.alpha1, truth.alpha2, truth.eta0, truth.eta1, truth.tau1, truth.tau2, rng
    )
    xb1 = xb2 = 0.0
    if truth.use_covariates:
        if X is None:
            raise ValidationError("truth has covariate effects but no X was supplied")
        Xn = preprocess_covariates(X).normalize(X)
        if Xn.shape[1] != len(truth.beta1):
            raise DimensionMismatch(f"X has {Xn.shape[1]} columns, truth has {len(truth.beta1)} effects")
        xb1 = Xn @ np.asarray(truth.beta1)
        xb2 = Xn @ np.asarray(truth.beta2)
    zeta1 = truth.gamma1 + xb1 + phi1
    zeta2 = truth.gamma2 + xb2 + phi2
    lin2 = mm_project(H, zeta2)
    y1 = negbin_draw(E1 * np.exp(zeta1), truth.psi1, rng)
    y2 = negbin_draw(E2 * np.exp(lin2), truth.psi2, rng)
    data = Dataset(y1=y1, y2=y2, E1=E1, E2=E2, X=X if truth.use_covariates else None)
    state = ParameterState(
        phi1=phi1, phi2=phi2, alpha1=truth.alpha1, alpha2=truth.alpha2,
        tau1=truth.tau1, tau2=truth.tau2, eta0=truth.eta0, eta1=truth.eta1,
        gamma1=truth.gamma1, gamma2=truth.gamma2,
        beta1=np.asarray(truth.beta1, dtype=float), beta2=np.asarray(truth.beta2, dtype=float),
        psi1=truth.psi1, psi2=truth.psi2,
    )
    return data, state


@dataclass
class Scenario:
    graph: SpatialGraph
    H: MembershipMatrix
    data: Dataset
    truth: TruthSpec
    state: ParameterState
    X: Optional[np.ndarray] = field(default=None)


def simulate_scenario(
    truth: TruthSpec,
    rows: int,
    cols: int,
    m: int,
    rng: np.random.Generator,
    sparsity: float = 8.0,
    graph: Optional[SpatialGraph] = None,
    H: Optional[MembershipMatrix] = None,
) -> Scenario:
    """Lattice, memberships, covariates, offsets and counts in one call."""
    graph = graph or make_lattice(rows, cols)
    H = H or make_membership(m, graph, sparsity, rng)
    X = rng.uniform(0.0, 1.0, (graph.n, len(truth.beta1))) if truth.use_covariates else None
    E1 = draw_offsets(graph.n, rng)
    E2 = draw_offsets(H.m, rng)
    data, state = generate_dataset(truth, graph, H, X, E1, E2, rng)
    return Scenario(graph, H, data, truth, state, X)
