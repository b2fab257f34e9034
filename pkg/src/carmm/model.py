"""Joint model: negative-binomial likelihoods, GMCAR/MCAR priors, hyperpriors.

Everything here works on the natural parameterisation (:class:`ParameterState`).
The unconstrained parameterisation used by the sampler lives in
:mod:`carmm.target`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .errors import (
    ConstantColumn,
    DimensionMismatch,
    InvalidParameter,
    LengthMismatch,
    OutOfDomain,
    ValidationError,
    ZeroOffset,
)
from .graph import SpatialGraph, car_logdet
from .membership import MembershipMatrix, mm_project

LOG_2PI = float(np.log(2.0 * np.pi))
MU_FLOOR = 1e-12

PriorKind = Literal["gmcar", "mcar"]
AlphaConstraint = Literal["unit_interval", "symmetric_unit"]


# --------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class Dataset:
    """Counts and offsets for both outcomes on their native frameworks.

    ``y1``/``E1`` are areal (length ``n``), ``y2``/``E2`` are per membership
    (length ``m``). ``X`` is an optional ``n x p`` covariate matrix.
    """

    y1: np.ndarray
    y2: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    X: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("y1", "y2"):
            y = np.asarray(getattr(self, name))
            if y.ndim != 1 or not np.all(np.isfinite(y)) or (y < 0).any() or np.any(y != np.round(y)):
                raise ValidationError(f"{name} must be a vector of nonnegative integer counts")
            object.__setattr__(self, name, y.astype(np.int64))
        for name in ("E1", "E2"):
            E = np.asarray(getattr(self, name), dtype=float)
            if E.ndim != 1 or not np.all(np.isfinite(E)) or (E <= 0).any():
                raise ZeroOffset(f"{name} must be strictly positive and finite")
            object.__setattr__(self, name, E)
        if len(self.y1) != len(self.E1):
            raise LengthMismatch(f"y1 has {len(self.y1)} entries but E1 has {len(self.E1)}")
        if len(self.y2) != len(self.E2):
            raise LengthMismatch(f"y2 has {len(self.y2)} entries but E2 has {len(self.E2)}")
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape[0] != len(self.y1) or not np.all(np.isfinite(X)):
                raise DimensionMismatch("X must be finite with one row per area")
            object.__setattr__(self, "X", X if X.shape[1] else None)

    @property
    def n(self) -> int:
        return len(self.y1)

    @property
    def m(self) -> int:
        return len(self.y2)

    @property
    def p(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    def check(self, graph: SpatialGraph, H: MembershipMatrix) -> None:
        if graph.n != self.n or H.n != self.n:
            raise DimensionMismatch(f"{self.n} areal observations vs graph n={graph.n}, membership n={H.n}")
        if H.m != self.m:
            raise DimensionMismatch(f"{self.m} membership observations vs membership matrix m={H.m}")


@dataclass(frozen=True)
class Hyperpriors:
    """Scales of the weakly informative priors.

    ``gamma`` and ``eta`` are Normal(0, sd), ``tau`` Half-Normal(0, sd),
    ``psi`` Gamma(shape, rate). Alphas are uniform on their interval and the
    QR-space coefficients are flat.
    """

    gamma_sd: float = 5.0
    eta_sd: float = 5.0
    tau_sd: float = 5.0
    psi_shape: float = 2.0
    psi_rate: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise InvalidParameter(f"hyperprior {k} must be positive, got {v!r}")


@dataclass(frozen=True)
class ModelSpec:
    prior_kind: PriorKind = "gmcar"
    use_covariates: bool = False
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    alpha_constraint: Optional[AlphaConstraint] = None

    def __post_init__(self):
        if self.prior_kind not in ("gmcar", "mcar"):
            raise InvalidParameter(f"unknown prior kind {self.prior_kind!r}")
        if self.alpha_constraint not in (None, "unit_interval", "symmetric_unit"):
            raise InvalidParameter(f"unknown alpha constraint {self.alpha_constraint!r}")

    @property
    def constraint(self) -> AlphaConstraint:
        if self.alpha_constraint is not None:
            return self.alpha_constraint
        return "unit_interval" if self.prior_kind == "mcar" else "symmetric_unit"

    def alpha_interval(self, graph: SpatialGraph) -> tuple[float, float]:
        box = (0.0, 1.0) if self.constraint == "unit_interval" else (-1.0, 1.0)
        lo, hi = graph.alpha_bounds
        return max(box[0], lo), min(box[1], hi)


@dataclass(frozen=True, eq=False)
class ParameterState:
    """One point of the model in its natural parameterisation.

    ``beta1``/``beta2`` are the coefficients on whatever design enters the
    linear predictor: the scaled ``Q*`` when covariates are QR-preprocessed,
    otherwise the raw matrix. Use :func:`recover_beta` to map back.
    """

    phi1: np.ndarray
    phi2: np.ndarray
    alpha1: float
    alpha2: float
    tau1: float
    tau2: float
    eta0: float
    eta1: float
    gamma1: float
    gamma2: float
    beta1: np.ndarray
    beta2: np.ndarray
    psi1: float
    psi2: float

    @property
    def n(self) -> int:
        return len(self.phi1)

    @property
    def p(self) -> int:
        return len(self.beta1)

    def replace(self, **changes) -> "ParameterState":
        return replace(self, **changes)

    def validate(self, spec: ModelSpec, graph: SpatialGraph) -> None:
        lo, hi = spec.alpha_interval(graph)
        for name in ("alpha1", "alpha2"):
            a = getattr(self, name)
            if not lo < a < hi:
                raise OutOfDomain(f"{name}={a!r} outside ({lo}, {hi})")
        for name in ("tau1", "tau2", "psi1", "psi2"):
            if not getattr(self, name) > 0:
                raise OutOfDomain(f"{name} must be positive")
        if spec.prior_kind == "mcar" and (self.alpha1 != self.alpha2 or self.eta1 != 0.0):
            raise OutOfDomain("MCAR requires alpha1 == alpha2 and eta1 == 0")
        if len(self.phi1) != graph.n or len(self.phi2) != graph.n:
            raise DimensionMismatch("phi vectors must have one entry per area")
        if len(self.beta1) != len(self.beta2):
            raise DimensionMismatch("beta1 and beta2 must have equal length")


@dataclass(frozen=True, eq=False)
class CovariatePreprocess:
    """Min-max normalisation followed by a scaled thin QR factorisation."""

    column_mins: np.ndarray
    column_ranges: np.ndarray
    Q_star: np.ndarray
    R_star: np.ndarray
    R_star_inverse: np.ndarray

    @property
    def p(self) -> int:
        return self.Q_star.shape[1]

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.column_mins) / self.column_ranges


# --------------------------------------------------------------------------
# likelihood pieces


def negbin_logpmf(y, mu, psi):
    """Log pmf of the mean/overdispersion negative binomial.

    ``Var(Y) = mu + mu**2 / psi``. Broadcasts over arrays.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(~(mu > 0)) or np.any(~(psi > 0)):
        raise InvalidParameter("negative binomial needs mu > 0 and psi > 0")
    log_mp = np.log(mu + psi)
    out = (
        gammaln(y + psi) - gammaln(psi) - gammaln(y + 1.0)
        + y * (np.log(mu) - log_mp) + psi * (np.log(psi) - log_mp)
    )
    return out if out.ndim else float(out)


def compute_offsets(rates, populations) -> float:
    """Expected count: reference rates applied to a population age profile."""
    rates = np.asarray(rates, dtype=float)
    populations = np.asarray(populations, dtype=float)
    if rates.shape != populations.shape:
        raise LengthMismatch(f"{rates.size} rates vs {populations.size} population groups")
    if (rates < 0).any() or (rates > 1).any():
        raise InvalidParameter("rates must lie in [0, 1]")
    if (populations < 0).any():
        raise InvalidParameter("populations must be nonnegative")
    total = float(rates @ populations)
    if not total > 0:
        raise ZeroOffset("offset is zero: no age group has both a positive rate and population")
    return total


# --------------------------------------------------------------------------
# spatial priors


def _car_quad(graph: SpatialGraph, x: np.ndarray, alpha: float) -> float:
    """``x' (D - alpha W) x`` via the edge list."""
    e = graph.edges
    return float(graph.degrees @ (x * x) - 2.0 * alpha * (x[e[:, 0]] @ x[e[:, 1]]))


def gmcar_logdensity(phi1, phi2, alpha1, alpha2, eta0, eta1, tau1, tau2, graph: SpatialGraph) -> float:
    """Log-density of the bivariate GMCAR prior.

    ``phi2`` is a proper CAR with precision ``tau2 (D - alpha2 W)`` and
    ``phi1 | phi2`` is Gaussian with mean ``(eta0 I + eta1 W) phi2`` and
    precision ``tau1 (D - alpha1 W)``.
    """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    resid = phi1 - eta0 * phi2 - eta1 * (graph.adjacency @ phi2)
    ld1 = car_logdet(graph, alpha1, tau1)
    ld2 = car_logdet(graph, alpha2, tau2)
    return (
        0.5 * (ld1 - tau1 * _car_quad(graph, resid, alpha1))
        + 0.5 * (ld2 - tau2 * _car_quad(graph, phi2, alpha2))
        - graph.n * LOG_2PI
    )


def mcar_logdensity(phi1, phi2, alpha, tau1, tau2, eta0, graph: SpatialGraph) -> float:
    """MCAR(alpha, Lambda) log-density written as the constrained GMCAR."""
    return gmcar_logdensity(phi1, phi2, alpha, alpha, eta0, 0.0, tau1, tau2, graph)


def gmcar_score(phi1, phi2, alpha1, alpha2, eta0, eta1, tau1, tau2, graph: SpatialGraph):
    """Gradient of :func:`gmcar_logdensity` with respect to ``(phi1, phi2)``."""
    W = graph.adjacency
    d = graph.degrees
    resid = phi1 - eta0 * phi2 - eta1 * (W @ phi2)
    g_resid = -tau1 * (d * resid - alpha1 * (W @ resid))
    g1 = g_resid
    g2 = -(eta0 * g_resid + eta1 * (W @ g_resid)) - tau2 * (d * phi2 - alpha2 * (W @ phi2))
    return g1, g2


def lambda_to_gmcar(Lambda) -> tuple[float, float, float]:
    """Map a 2x2 MCAR cross-outcome precision to ``(tau1, tau2, eta0)``."""
    L = np.asarray(Lambda, dtype=float)
    tau1 = L[0, 0]
    eta0 = -L[0, 1] / L[0, 0]
    tau2 = L[1, 1] - L[0, 1] ** 2 / L[0, 0]
    return float(tau1), float(tau2), float(eta0)


def gmcar_to_lambda(tau1: float, tau2: float, eta0: float) -> np.ndarray:
    off = -eta0 * tau1
    return np.array([[tau1, off], [off, tau2 + eta0 ** 2 * tau1]])


# --------------------------------------------------------------------------
# covariates


def preprocess_covariates(X) -> CovariatePreprocess:
    """Min-max normalise columns of ``X`` then take a scaled thin QR."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p < 1:
        raise DimensionMismatch("need at least one covariate column")
    mins = X.min(axis=0)
    ranges = X.max(axis=0) - mins
    flat = np.flatnonzero(ranges <= 0)
    if len(flat):
        raise ConstantColumn(int(flat[0]))
    Xn = (X - mins) / ranges
    Q, R = np.linalg.qr(Xn, mode="reduced")
    c = np.sqrt(n - 1.0)
    Q_star = Q * c
    R_star = R / c
    R_inv = solve_triangular(R_star, np.eye(p), lower=False)
    return CovariatePreprocess(mins, ranges, Q_star, R_star, R_inv)


def recover_beta(theta_tilde, preproc: CovariatePreprocess) -> np.ndarray:
    """Map QR-space coefficients back to the normalised covariate scale."""
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    if theta_tilde.shape[-1] != preproc.p:
        raise DimensionMismatch(f"expected {preproc.p} coefficients, got {theta_tilde.shape[-1]}")
    return theta_tilde @ preproc.R_star_inverse.T


Design = Union[CovariatePreprocess, np.ndarray, None]


def design_matrix(design: Design, n: int) -> np.ndarray:
    if design is None:
        return np.zeros((n, 0))
    if isinstance(design, CovariatePreprocess):
        return design.Q_star
    X = np.asarray(design, dtype=float)
    return X[:, None] if X.ndim == 1 else X


# --------------------------------------------------------------------------
# joint density


def linear_predictors(state: ParameterState, H: MembershipMatrix, design: Design = None):
    """Return ``(log rho1, zeta2, log rho2)``."""
    n = state.n
    if H.n != n:
        raise DimensionMismatch(f"membership matrix has {H.n} areas, state has {n}")
    X = design_matrix(design, n)
    if X.shape != (n, state.p):
        raise DimensionMismatch(f"design is {X.shape}, expected ({n}, {state.p})")
    zeta1 = state.gamma1 + X @ state.beta1 + state.phi1
    zeta2 = state.gamma2 + X @ state.beta2 + state.phi2
    return zeta1, zeta2, mm_project(H, zeta2)


def _normal_lpdf(x, sd):
    return -0.5 * (x / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI


def _half_normal_lpdf(x, sd):
    return np.log(2.0) + _normal_lpdf(x, sd)


def _gamma_lpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def hyperprior_logdensity(state: ParameterState, spec: ModelSpec, graph: SpatialGraph) -> float:
    hp = spec.hyperpriors
    lo, hi = spec.alpha_interval(graph)
    n_alpha = 1 if spec.prior_kind == "mcar" else 2
    total = -n_alpha * np.log(hi - lo)
    total += _normal_lpdf(state.gamma1, hp.gamma_sd) + _normal_lpdf(state.gamma2, hp.gamma_sd)
    total += _normal_lpdf(state.eta0, hp.eta_sd)
    if spec.prior_kind == "gmcar":
        total += _normal_lpdf(state.eta1, hp.eta_sd)
    total += _half_normal_lpdf(state.tau1, hp.tau_sd) + _half_normal_lpdf(state.tau2, hp.tau_sd)
    total += _gamma_lpdf(state.psi1, hp.psi_shape, hp.psi_rate)
    total += _gamma_lpdf(state.psi2, hp.psi_shape, hp.psi_rate)
    return float(total)


def spatial_logdensity(state: ParameterState, spec: ModelSpec, graph: SpatialGraph) -> float:
    if spec.prior_kind == "mcar":
        return mcar_logdensity(state.phi1, state.phi2, state.alpha1, state.tau1, state.tau2, state.eta0, graph)
    return gmcar_logdensity(
        state.phi1, state.phi2, state.alpha1, state.alpha2,
        state.eta0, state.eta1, state.tau1, state.tau2, graph,
    )


def pointwise_loglik(state: ParameterState, data: Dataset, H: MembershipMatrix, design: Design = None):
    """Per-observation log-likelihoods ``(areal, membership)``."""
    eta1, _, eta2 = linear_predictors(state, H, design)
    mu1 = np.maximum(data.E1 * np.exp(eta1), MU_FLOOR)
    mu2 = np.maximum(data.E2 * np.exp(eta2), MU_FLOOR)
    return negbin_logpmf(data.y1, mu1, state.psi1), negbin_logpmf(data.y2, mu2, state.psi2)


def log_posterior(
    state: ParameterState,
    data: Dataset,
    spec: ModelSpec,
    graph: SpatialGraph,
    H: MembershipMatrix,
    design: Design = None,
) -> float:
    """Unnormalised joint log-posterior in the natural parameterisation."""
    state.validate(spec, graph)
    data.check(graph, H)
    ll1, ll2 = pointwise_loglik(state, data, H, design)
    return float(ll1.sum() + ll2.sum()) + spatial_logdensity(state, spec, graph) + hyperprior_logdensity(state, spec, graph)
