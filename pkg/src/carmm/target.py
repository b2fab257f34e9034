"""Unconstrained parameterisation and the log-density/gradient HMC runs on.

Layout of the unconstrained vector (MCAR drops ``a2`` and ``eta1``)::

    z1[n] z2[n] a1 a2 log_tau1 log_tau2 eta0 eta1 gamma1 gamma2 theta1[p] theta2[p] log_psi1 log_psi2

``z1``/``z2`` are unit-precision CAR fields. The spatial effects are
``phi2 = z2 / sqrt(tau2)`` and ``phi1 = (eta0 I + eta1 W) phi2 + z1 / sqrt(tau1)``.
Alphas use a scaled logistic onto their admissible interval; tau and psi
use logs.

Two encodings of the field blocks are available:

``"unit"``
    the blocks hold ``z`` itself, with prior ``N(0, (D - alpha W)^-1)``.
``"spectral"`` (default)
    the blocks hold white noise ``e`` and ``z = D^-1/2 V (1 - alpha lam)^-1/2 e``,
    where ``V, lam`` are the eigenpairs of ``D^-1/2 W D^-1/2``. The prior
    on ``e`` no longer depends on alpha, which removes the funnel between
    a weakly identified alpha and its field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln, logit

from .errors import DimensionMismatch, InvalidParameter, NonFiniteDensity, OutOfDomain
from .graph import SpatialGraph
from .membership import MembershipMatrix
from .model import (
    LOG_2PI,
    MU_FLOOR,
    Dataset,
    Design,
    ModelSpec,
    ParameterState,
    design_matrix,
)

# dense operators below this size beat scipy.sparse call overhead
_DENSE_LIMIT = 600
_LOG_MU_FLOOR = float(np.log(MU_FLOOR))


@dataclass(frozen=True)
class Layout:
    n: int
    p: int
    kind: str

    @property
    def n_alpha(self) -> int:
        return 1 if self.kind == "mcar" else 2

    @property
    def n_eta(self) -> int:
        return 1 if self.kind == "mcar" else 2

    @property
    def dim(self) -> int:
        return 2 * self.n + self.n_alpha + 2 + self.n_eta + 2 + 2 * self.p + 2

    def slices(self) -> dict[str, slice]:
        out = {}
        pos = 0
        for name, size in (
            ("z1", self.n), ("z2", self.n), ("alpha", self.n_alpha), ("log_tau", 2),
            ("eta", self.n_eta), ("gamma", 2), ("theta1", self.p), ("theta2", self.p), ("log_psi", 2),
        ):
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    @classmethod
    def from_dim(cls, dim: int, n: int, kind: str) -> "Layout":
        base = cls(n, 0, kind).dim
        p2 = dim - base
        if p2 < 0 or p2 % 2:
            raise DimensionMismatch(f"vector of length {dim} does not fit n={n} for {kind}")
        return cls(n, p2 // 2, kind)


PARAMETERIZATIONS = ("spectral", "unit")


class Transform:
    """Maps between :class:`ParameterState` and the unconstrained vector."""

    def __init__(self, spec: ModelSpec, graph: SpatialGraph, p: int, parameterization: str = "spectral"):
        if parameterization not in PARAMETERIZATIONS:
            raise InvalidParameter(f"unknown parameterization {parameterization!r}")
        self.spec = spec
        self.graph = graph
        self.parameterization = parameterization
        self.layout = Layout(graph.n, p, spec.prior_kind)
        self.sl = self.layout.slices()
        self.alpha_lo, self.alpha_hi = spec.alpha_interval(graph)
        if parameterization == "spectral":
            d_isqrt = 1.0 / np.sqrt(graph.degrees.astype(float))
            A = d_isqrt[:, None] * graph.dense_adjacency() * d_isqrt[None, :]
            lam, V = np.linalg.eigh(A)
            self.lam = np.clip(lam, -1.0, 1.0)
            self.basis = d_isqrt[:, None] * V
            self.basis_inv = V.T * np.sqrt(graph.degrees.astype(float))[None, :]

    def alpha_of(self, a):
        return self.alpha_lo + (self.alpha_hi - self.alpha_lo) * expit(a)

    def _alphas(self, u):
        alphas = self.alpha_of(u[self.sl["alpha"]])
        return alphas[0], alphas[-1]

    def _scales(self, alpha):
        return 1.0 / np.sqrt(1.0 - alpha * self.lam)

    def fields(self, u):
        """Unit-precision fields ``(z1, z2)`` encoded in ``u``."""
        z1, z2 = u[self.sl["z1"]], u[self.sl["z2"]]
        if self.parameterization == "unit":
            return z1, z2
        alpha1, alpha2 = self._alphas(u)
        return self.basis @ (self._scales(alpha1) * z1), self.basis @ (self._scales(alpha2) * z2)

    def _encode(self, z, alpha):
        if self.parameterization == "unit":
            return z
        return (self.basis_inv @ z) / self._scales(alpha)

    def from_unconstrained(self, u) -> ParameterState:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.layout.dim,):
            raise DimensionMismatch(f"expected vector of length {self.layout.dim}, got {u.shape}")
        sl = self.sl
        alphas = self.alpha_of(u[sl["alpha"]])
        tau1, tau2 = np.exp(u[sl["log_tau"]])
        etas = u[sl["eta"]]
        eta0 = etas[0]
        eta1 = etas[1] if self.layout.n_eta == 2 else 0.0
        z1, z2 = self.fields(u)
        phi2 = z2 / np.sqrt(tau2)
        phi1 = eta0 * phi2 + eta1 * (self.graph.adjacency @ phi2) + z1 / np.sqrt(tau1)
        psi1, psi2 = np.exp(u[sl["log_psi"]])
        gamma1, gamma2 = u[sl["gamma"]]
        return ParameterState(
            phi1=phi1, phi2=phi2,
            alpha1=float(alphas[0]), alpha2=float(alphas[-1]),
            tau1=float(tau1), tau2=float(tau2),
            eta0=float(eta0), eta1=float(eta1),
            gamma1=float(gamma1), gamma2=float(gamma2),
            beta1=u[sl["theta1"]].copy(), beta2=u[sl["theta2"]].copy(),
            psi1=float(psi1), psi2=float(psi2),
        )

    def to_unconstrained(self, state: ParameterState) -> np.ndarray:
        if state.p != self.layout.p:
            raise DimensionMismatch(f"state has {state.p} coefficients, transform expects {self.layout.p}")
        state.validate(self.spec, self.graph)
        lo, hi = self.alpha_lo, self.alpha_hi
        u = np.empty(self.layout.dim)
        sl = self.sl
        alphas = [state.alpha1] if self.layout.n_alpha == 1 else [state.alpha1, state.alpha2]
        u[sl["alpha"]] = logit((np.asarray(alphas) - lo) / (hi - lo))
        u[sl["log_tau"]] = np.log([state.tau1, state.tau2])
        u[sl["eta"]] = [state.eta0] if self.layout.n_eta == 1 else [state.eta0, state.eta1]
        resid = state.phi1 - state.eta0 * state.phi2 - state.eta1 * (self.graph.adjacency @ state.phi2)
        u[sl["z1"]] = self._encode(resid * np.sqrt(state.tau1), state.alpha1)
        u[sl["z2"]] = self._encode(state.phi2 * np.sqrt(state.tau2), state.alpha2)
        u[sl["gamma"]] = [state.gamma1, state.gamma2]
        u[sl["theta1"]] = state.beta1
        u[sl["theta2"]] = state.beta2
        u[sl["log_psi"]] = np.log([state.psi1, state.psi2])
        if not np.all(np.isfinite(u)):
            raise OutOfDomain("state maps to a non-finite unconstrained point")
        return u

    def log_jacobian(self, u) -> float:
        """Log-Jacobian of ``from_unconstrained`` at ``u``."""
        sl = self.sl
        a = u[sl["alpha"]]
        lt = u[sl["log_tau"]]
        total = -0.5 * self.layout.n * lt.sum() + lt.sum() + u[sl["log_psi"]].sum()
        total += np.sum(np.log(self.alpha_hi - self.alpha_lo) + np.log(expit(a)) + np.log(expit(-a)))
        if self.parameterization == "spectral":
            for alpha in self._alphas(u):
                total -= 0.5 * (self.graph.sum_log_degrees + np.log1p(-alpha * self.lam).sum())
        return float(total)


def to_unconstrained(state: ParameterState, spec: ModelSpec, graph: SpatialGraph,
                     parameterization: str = "spectral") -> np.ndarray:
    return Transform(spec, graph, state.p, parameterization).to_unconstrained(state)


def from_unconstrained(vector, spec: ModelSpec, graph: SpatialGraph,
                       parameterization: str = "spectral") -> ParameterState:
    layout = Layout.from_dim(len(vector), graph.n, spec.prior_kind)
    return Transform(spec, graph, layout.p, parameterization).from_unconstrained(vector)


class Posterior:
    """Log-posterior and analytic gradient on the unconstrained scale.

    The value equals ``log_posterior(state) + log_jacobian(u)`` with
    ``state = from_unconstrained(u)``.
    """

    def __init__(
        self,
        data: Dataset,
        spec: ModelSpec,
        graph: SpatialGraph,
        H: MembershipMatrix,
        design: Design = None,
        parameterization: str = "spectral",
    ):
        data.check(graph, H)
        self.data = data
        self.spec = spec
        self.graph = graph
        self.H = H
        self.design = design
        self.X = design_matrix(design, graph.n)
        self.transform = Transform(spec, graph, self.X.shape[1], parameterization)
        self.spectral = parameterization == "spectral"
        self.layout = self.transform.layout
        self.dim = self.layout.dim
        self.sl = self.transform.sl
        small = graph.n <= _DENSE_LIMIT
        self._W = graph.dense_adjacency() if small else graph.adjacency
        self._H = H.dense() if small else H.weights
        self._HT = self._H.T if small else H.weights.T.tocsr()
        self._d = graph.degrees.astype(float)
        self._lam = graph.car_eigenvalues
        if self.spectral:
            self._lam = self.transform.lam
            self._B = self.transform.basis
            self._BT = np.ascontiguousarray(self._B.T)
        self._y1 = data.y1.astype(float)
        self._y2 = data.y2.astype(float)
        self._y = np.concatenate([self._y1, self._y2])
        self._logE1 = np.log(data.E1)
        self._logE2 = np.log(data.E2)
        self._const = -(gammaln(self._y1 + 1).sum() + gammaln(self._y2 + 1).sum()) - graph.n * LOG_2PI
        self._width = self.transform.alpha_hi - self.transform.alpha_lo
        hp = spec.hyperpriors
        self._hp_const = (
            2 * (-np.log(hp.gamma_sd) - 0.5 * LOG_2PI)
            + self.layout.n_eta * (-np.log(hp.eta_sd) - 0.5 * LOG_2PI)
            + 2 * (np.log(2.0) - np.log(hp.tau_sd) - 0.5 * LOG_2PI)
            + 2 * (hp.psi_shape * np.log(hp.psi_rate) - gammaln(hp.psi_shape))
        )

    # convenience passthroughs
    def from_unconstrained(self, u) -> ParameterState:
        return self.transform.from_unconstrained(u)

    def to_unconstrained(self, state: ParameterState) -> np.ndarray:
        return self.transform.to_unconstrained(state)

    def log_jacobian(self, u) -> float:
        return self.transform.log_jacobian(u)

    def _logdet_terms(self, alpha):
        f = 1.0 - alpha * self._lam
        if np.any(f <= 0):
            return -np.inf, 0.0
        return np.log(f).sum(), -(self._lam / f).sum()

    def logp_and_grad(self, u):
        """Return ``(value, gradient)``; value is ``-inf`` outside the support."""
        with np.errstate(all="ignore"):
            value, grad = self._logp_and_grad(u)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return -np.inf, np.zeros_like(u)
        return value, grad

    def _logp_and_grad(self, u):
        sl = self.sl
        n = self.layout.n
        hp = self.spec.hyperpriors
        grad = np.empty_like(u)

        s = expit(u[sl["alpha"]])
        alphas = self.transform.alpha_lo + self._width * s
        alpha1, alpha2 = alphas[0], alphas[-1]
        # both field blocks as one (2, n) array
        E = u[: 2 * n].reshape(2, n)
        if self.spectral:
            f = 1.0 - alphas[:, None] * self._lam
            if f.min() <= 0:
                return -np.inf, grad
            S = 1.0 / np.sqrt(f)
            Z = (S * E) @ self._BT
        else:
            Z = E
        z1, z2 = Z
        lt1, lt2 = u[sl["log_tau"]]
        tau1, tau2 = np.exp(lt1), np.exp(lt2)
        sc1, sc2 = np.exp(-0.5 * lt1), np.exp(-0.5 * lt2)
        etas = u[sl["eta"]]
        eta0 = etas[0]
        eta1 = etas[1] if self.layout.n_eta == 2 else 0.0
        g1, g2 = u[sl["gamma"]]
        lp1, lp2 = u[sl["log_psi"]]
        psi1, psi2 = np.exp(lp1), np.exp(lp2)

        W = self._W
        phi2 = sc2 * z2
        Wphi2 = W @ phi2
        phi1 = eta0 * phi2 + eta1 * Wphi2 + sc1 * z1
        zeta1 = g1 + phi1
        zeta2 = g2 + phi2
        if self.layout.p:
            zeta1 = zeta1 + self.X @ u[sl["theta1"]]
            zeta2 = zeta2 + self.X @ u[sl["theta2"]]

        m = len(self._y2)
        y = self._y
        psi = np.empty(n + m)
        psi[:n] = psi1
        psi[n:] = psi2
        log_mu = np.empty(n + m)
        log_mu[:n] = self._logE1 + zeta1
        log_mu[n:] = self._logE2 + self._H @ zeta2
        live = log_mu > _LOG_MU_FLOOR
        log_mu = np.where(live, log_mu, _LOG_MU_FLOOR)
        mu = np.exp(log_mu)
        log_mp = np.log(mu + psi)
        ypsi = y + psi
        terms = gammaln(ypsi) + y * (log_mu - log_mp) - psi * log_mp
        dterms = digamma(ypsi) - log_mp - ypsi / (mu + psi)
        ll = terms.sum() + n * (psi1 * lp1 - gammaln(psi1)) + m * (psi2 * lp2 - gammaln(psi2))
        dg1, dg2 = digamma([psi1, psi2])
        dpsi1 = dterms[:n].sum() + n * (lp1 + 1.0 - dg1)
        dpsi2 = dterms[n:].sum() + m * (lp2 + 1.0 - dg2)
        resid = np.where(live, psi * (y - mu) / (mu + psi), 0.0)
        r1 = resid[:n]
        r2 = resid[n:]

        if self.spectral:
            prior = -0.5 * np.dot(u[: 2 * n], u[: 2 * n])
        else:
            WZ = Z @ W
            ld1, dld1 = self._logdet_terms(alpha1)
            ld2, dld2 = self._logdet_terms(alpha2) if self.layout.n_alpha == 2 else (ld1, dld1)
            zWz1 = z1 @ WZ[0]
            zWz2 = z2 @ WZ[1]
            prior = 0.5 * (ld1 + ld2 - self._d @ (z1 * z1 + z2 * z2) + alpha1 * zWz1 + alpha2 * zWz2)
            prior += self.graph.sum_log_degrees

        hyper = self._hp_const
        hyper -= 0.5 * (g1 * g1 + g2 * g2) / hp.gamma_sd ** 2
        hyper -= 0.5 * (etas @ etas) / hp.eta_sd ** 2
        hyper -= 0.5 * (tau1 * tau1 + tau2 * tau2) / hp.tau_sd ** 2
        hyper += (hp.psi_shape - 1.0) * (lp1 + lp2) - hp.psi_rate * (psi1 + psi2)
        # log-Jacobians: tau and psi logs, alpha logistic (uniform prior cancels its width)
        jac = lt1 + lt2 + lp1 + lp2 + np.log(s * (1.0 - s)).sum()

        value = ll + prior + hyper + jac + self._const
        if not np.isfinite(value):
            return -np.inf, grad

        gphi1 = r1
        gzeta2 = self._HT @ r2
        gphi2 = gzeta2 + eta0 * gphi1 + eta1 * (W @ gphi1)

        dalpha = self._width * s * (1.0 - s)
        gz = np.stack([sc1 * gphi1, sc2 * gphi2])
        if self.spectral:
            Bg = gz @ self._B
            grad[: 2 * n] = (S * Bg - E).ravel()
            # d S / d alpha = lam S^3 / 2
            da1, da2 = 0.5 * np.sum(Bg * E * self._lam * S ** 3, axis=1)
        else:
            grad[: 2 * n] = (gz - (self._d * Z - alphas[:, None] * WZ)).ravel()
            da1 = 0.5 * (zWz1 + dld1)
            da2 = 0.5 * (zWz2 + dld2)
        if self.layout.n_alpha == 2:
            grad[sl["alpha"]] = np.array([da1, da2]) * dalpha + (1.0 - 2.0 * s)
        else:
            grad[sl["alpha"]] = (da1 + da2) * dalpha + (1.0 - 2.0 * s)

        inv_tau_var = 1.0 / hp.tau_sd ** 2
        grad[sl["log_tau"]] = (
            -0.5 * sc1 * (z1 @ gphi1) - tau1 * tau1 * inv_tau_var + 1.0,
            -0.5 * sc2 * (z2 @ gphi2) - tau2 * tau2 * inv_tau_var + 1.0,
        )
        if self.layout.n_eta == 2:
            grad[sl["eta"]] = (phi2 @ gphi1 - eta0 / hp.eta_sd ** 2, Wphi2 @ gphi1 - eta1 / hp.eta_sd ** 2)
        else:
            grad[sl["eta"]] = phi2 @ gphi1 - eta0 / hp.eta_sd ** 2
        grad[sl["gamma"]] = (r1.sum() - g1 / hp.gamma_sd ** 2, gzeta2.sum() - g2 / hp.gamma_sd ** 2)
        if self.layout.p:
            grad[sl["theta1"]] = self.X.T @ r1
            grad[sl["theta2"]] = self.X.T @ gzeta2
        grad[sl["log_psi"]] = (
            psi1 * dpsi1 + hp.psi_shape - hp.psi_rate * psi1,
            psi2 * dpsi2 + hp.psi_shape - hp.psi_rate * psi2,
        )
        return float(value), grad

    def logp(self, u) -> float:
        return self.logp_and_grad(u)[0]

    def derived(self, u):
        """Per-draw quantities: ``(state, zeta1, zeta2, lin2, mu1, mu2)``."""
        state = self.from_unconstrained(u)
        zeta1 = state.gamma1 + self.X @ state.beta1 + state.phi1
        zeta2 = state.gamma2 + self.X @ state.beta2 + state.phi2
        lin2 = self.H.weights @ zeta2
        mu1 = np.maximum(self.data.E1 * np.exp(zeta1), MU_FLOOR)
        mu2 = np.maximum(self.data.E2 * np.exp(lin2), MU_FLOOR)
        return state, zeta1, zeta2, lin2, mu1, mu2


def grad_log_posterior(
    state: ParameterState,
    data: Dataset,
    spec: ModelSpec,
    graph: SpatialGraph,
    H: MembershipMatrix,
    design: Design = None,
) -> np.ndarray:
    """Gradient of the unconstrained log-density at the point matching ``state``."""
    post = Posterior(data, spec, graph, H, design)
    value, grad = post.logp_and_grad(post.to_unconstrained(state))
    if not np.isfinite(value):
        raise NonFiniteDensity("log-density is not finite at this state")
    return grad
