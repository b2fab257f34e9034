"""Deviance, DIC, tail-area probabilities and PSIS leave-one-out."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import InvalidParameter, LengthMismatch
from .model import Dataset

TAIL_FRACTION = 0.2
PARETO_K_WARN = 0.7


def saturated_deviance(y, mu, psi):
    """Saturated negative-binomial deviance.

    ``mu`` may carry leading draw axes, with ``psi`` broadcasting against
    them (e.g. ``mu`` of shape ``(S, n)`` and ``psi`` of shape ``(S,)``).
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if mu.shape[-1] != y.shape[-1]:
        raise LengthMismatch(f"{y.shape[-1]} observations vs {mu.shape[-1]} means")
    if np.any(~(mu > 0)) or np.any(~(psi > 0)):
        raise InvalidParameter("deviance needs mu > 0 and psi > 0")
    psi = psi[..., None]
    # y log(y / mu) is taken as 0 at y = 0
    t1 = xlogy(y, y) - xlogy(y, mu)
    t2 = (y + psi) * (np.log1p(y / psi) - np.log1p(mu / psi))
    out = 2.0 * (t1 - t2).sum(axis=-1)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DICResult:
    d_bar: float
    d_at_mean: float
    p_d: float
    dic: float


def dic_from_draws(y, mu_draws, psi_draws) -> DICResult:
    mu_draws = np.asarray(mu_draws, dtype=float)
    psi_draws = np.asarray(psi_draws, dtype=float)
    d_bar = float(np.mean(saturated_deviance(y, mu_draws, psi_draws)))
    d_hat = float(saturated_deviance(y, mu_draws.mean(axis=0), psi_draws.mean()))
    p_d = d_bar - d_hat
    return DICResult(d_bar, d_hat, p_d, d_bar + p_d)


def outcome_draws(samples, data: Dataset, outcome: int):
    """Flattened ``(y, mu draws, psi draws, yrep draws, loglik draws)`` for one outcome."""
    n = samples.n
    if outcome == 1:
        y, mu, yrep, ll = data.y1, data.E1 * samples.flat(samples.rho1), samples.flat(samples.yrep1), samples.flat(samples.loglik)[:, :n]
    elif outcome == 2:
        y, mu, yrep, ll = data.y2, data.E2 * samples.flat(samples.rho2), samples.flat(samples.yrep2), samples.flat(samples.loglik)[:, n:]
    else:
        raise InvalidParameter(f"outcome must be 1 or 2, got {outcome!r}")
    return y, mu, samples.flat(samples.psi(outcome)), yrep, ll


def dic(samples, data: Dataset, outcome: int) -> DICResult:
    y, mu, psi, _, _ = outcome_draws(samples, data, outcome)
    return dic_from_draws(y, mu, psi)


def tap(y, yrep) -> np.ndarray:
    """Posterior predictive tail-area probability per observation (ties count half)."""
    y = np.asarray(y)
    yrep = np.asarray(yrep)
    if yrep.ndim != 2 or yrep.shape[1] != y.shape[0]:
        raise LengthMismatch("yrep must be shaped (draws, observations)")
    below = (yrep < y).sum(axis=0)
    ties = (yrep == y).sum(axis=0)
    return (below + 0.5 * ties) / yrep.shape[0]


def tail_proportions(p, cutoffs: Sequence[float] = (0.05, 0.1)) -> dict[float, float]:
    """Fraction of tail-area probabilities in ``[0, c] U [1 - c, 1]`` per cutoff."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise InvalidParameter("tail-area probabilities must lie in [0, 1]")
    return {c: float(np.mean((p <= c) | (p >= 1.0 - c))) for c in cutoffs}


# --------------------------------------------------------------------------
# PSIS-LOO


def gpd_fit(x, method: str = "zhang_stephens") -> tuple[float, float]:
    """Fit a generalised Pareto (location 0) to positive exceedances; returns ``(k, sigma)``."""
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    if method == "moments":
        m = x.mean()
        v = x.var(ddof=1)
        k = 0.5 * (1.0 - m * m / v)
        return float(k), float(m * (1.0 - k))
    if method != "zhang_stephens":
        raise InvalidParameter(f"unknown GPD fit method {method!r}")
    if not x[-1] > 0:
        raise InvalidParameter("GPD fit needs at least one positive exceedance")
    prior = 3.0
    m_est = 30 + int(np.sqrt(n))
    # repeated draws can tie at the cutoff; anchor the grid on a positive quartile
    quartile = x[int(n / 4 + 0.5) - 1]
    if not quartile > 0:
        quartile = x[x > 0][0]
    b = 1.0 - np.sqrt(m_est / (np.arange(1, m_est + 1) - 0.5))
    b = b / (prior * quartile) + 1.0 / x[-1]
    k_b = np.log1p(-b[:, None] * x).mean(axis=1)
    len_scale = n * (np.log(-(b / k_b)) - k_b - 1.0)
    with np.errstate(over="ignore"):
        weights = 1.0 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)
    keep = weights >= 10 * np.finfo(float).eps
    b = b[keep]
    weights = weights[keep] / weights[keep].sum()
    b_post = float(weights @ b)
    if b_post == 0.0:
        k_post, sigma = 0.0, float(x.mean())
    else:
        k_post = float(np.log1p(-b_post * x).mean())
        sigma = -k_post / b_post
    # weakly informative shrinkage of k towards 0.5; positive k is a heavy tail
    k_post = (n * k_post + 10 * 0.5) / (n + 10)
    return float(k_post), float(sigma)


def _gpd_quantile(prob, k, sigma):
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-prob)
    return sigma * np.expm1(-k * np.log1p(-prob)) / k


def psis_smooth(log_weights, tail_fraction: float = TAIL_FRACTION, method: str = "zhang_stephens"):
    """Pareto-smooth one vector of log importance weights; returns ``(smoothed, k)``.

    Fewer than five tail draws leave the weights untouched with ``k = nan``.
    """
    lw = np.asarray(log_weights, dtype=float).copy()
    S = len(lw)
    M = int(np.ceil(tail_fraction * S))
    if M < 5 or M >= S:
        return lw, np.nan
    lw -= lw.max()
    order = np.argsort(lw, kind="stable")
    tail_idx = order[-M:]
    cutoff = lw[order[-M - 1]]
    exceed = np.exp(lw[tail_idx]) - np.exp(cutoff)
    if np.all(exceed <= 0):
        return lw, np.nan
    k, sigma = gpd_fit(exceed, method)
    if np.isfinite(k) and sigma > 0:
        probs = (np.arange(1, M + 1) - 0.5) / M
        smoothed = np.log(np.exp(cutoff) + _gpd_quantile(probs, k, sigma))
        lw[tail_idx] = np.minimum(smoothed, 0.0)
    return lw, float(k)


@dataclass(frozen=True)
class LooResult:
    elpd_loo: float
    pointwise: np.ndarray
    pareto_k: np.ndarray

    @property
    def looic(self) -> float:
        return -2.0 * self.elpd_loo

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero(self.pareto_k > PARETO_K_WARN)


def loo_elpd(loglik, smooth: bool = True, tail_fraction: float = TAIL_FRACTION,
             method: str = "zhang_stephens") -> LooResult:
    """Importance-sampled leave-one-out elpd from a ``(draws, observations)`` log-likelihood."""
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if not np.all(np.isfinite(ll)):
        raise InvalidParameter("log-likelihood must be finite")
    S, N = ll.shape
    pointwise = np.empty(N)
    ks = np.full(N, np.nan)
    for i in range(N):
        lw = -ll[:, i]
        if smooth:
            lw, ks[i] = psis_smooth(lw, tail_fraction, method)
        pointwise[i] = logsumexp(lw + ll[:, i]) - logsumexp(lw)
    return LooResult(float(pointwise.sum()), pointwise, ks)


def elpd_diff_se(pointwise_a, pointwise_b) -> tuple[float, float]:
    """Summed elpd difference and its standard error ``sqrt(n * var(diff))``."""
    a = np.asarray(pointwise_a, dtype=float)
    b = np.asarray(pointwise_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"pointwise vectors differ in length: {a.shape} vs {b.shape}")
    d = a - b
    n = len(d)
    se = float(np.sqrt(n * d.var(ddof=1))) if n > 1 else float("nan")
    return float(d.sum()), se


# --------------------------------------------------------------------------
# combined report


@dataclass(frozen=True)
class OutcomeFit:
    dic: DICResult
    loo: LooResult
    tap: np.ndarray
    tails: dict

    def as_dict(self) -> dict:
        return {
            "d_bar": self.dic.d_bar,
            "d_at_mean": self.dic.d_at_mean,
            "p_d": self.dic.p_d,
            "dic": self.dic.dic,
            "elpd_loo": self.loo.elpd_loo,
            "looic": self.loo.looic,
            "tap_tail_05": self.tails[0.05],
            "tap_tail_10": self.tails[0.1],
            "n_pareto_k_high": int(len(self.loo.flagged)),
        }


def outcome_fit(samples, data: Dataset, outcome: int, smooth: bool = True) -> OutcomeFit:
    y, mu, psi, yrep, ll = outcome_draws(samples, data, outcome)
    p = tap(y, yrep)
    return OutcomeFit(dic_from_draws(y, mu, psi), loo_elpd(ll, smooth), p, tail_proportions(p))


def fit_report(samples, data: Dataset) -> dict[str, OutcomeFit]:
    """DIC, LOO and TAP summaries keyed ``"y1"`` (areal) and ``"y2"`` (membership)."""
    return {"y1": outcome_fit(samples, data, 1), "y2": outcome_fit(samples, data, 2)}
