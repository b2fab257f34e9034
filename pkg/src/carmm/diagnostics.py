"""Split R-hat, bulk effective sample size and posterior summaries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import ValidationError

QUANTILES = (0.025, 0.05, 0.95, 0.975)
RHAT_THRESHOLD = 1.01


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValidationError("draws must be shaped (chains, iterations)")
    if x.shape[1] < 2:
        raise ValidationError("need at least two iterations per chain")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    # odd lengths drop the middle draw
    return np.concatenate([x[:, :half], x[:, -half:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat(x: np.ndarray) -> float:
    n = x.shape[1]
    means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within == 0:
        return np.inf if between > 0 else np.nan
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def split_rhat(draws, rank_normalized: bool = False) -> float:
    """Classic split R-hat (``sqrt(V/W)`` over half-chains).

    With ``rank_normalized`` the draws are rank-normalised first and the
    maximum of the bulk and folded-tail values is returned. Constant draws
    give ``nan``.
    """
    x = _split(_as_chains(draws))
    if np.ptp(x) == 0:
        return np.nan
    if not rank_normalized:
        return _rhat(x)
    bulk = _rhat(_rank_normalize(x))
    folded = np.abs(x - np.median(x))
    tail = _rhat(_rank_normalize(folded))
    return float(max(bulk, tail))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row (biased, FFT-based)."""
    n = x.shape[1]
    size = next_fast_len(2 * n)
    xc = x - x.mean(axis=1, keepdims=True)
    f = rfft(xc, n=size, axis=1)
    return irfft(f * np.conj(f), n=size, axis=1)[:, :n] / n


def _ess(x: np.ndarray) -> float:
    chains, n = x.shape
    acov = _autocov(x)
    means = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if chains > 1:
        var_plus += means.var(ddof=1)
    rho = np.empty(n)
    rho[0] = 1.0
    acov_mean = acov.mean(axis=0)
    rho[1:] = 1.0 - (mean_var - acov_mean[1:]) / var_plus

    # Geyer initial positive sequence on paired sums, then monotone
    t = 0
    pairs = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pairs.append(s)
        t += 2
    if not pairs:
        pairs = [rho[0]]
    pairs = np.minimum.accumulate(np.asarray(pairs))
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(chains * n)) if chains * n > 1 else tau
    return float(chains * n / tau)


def ess_bulk(draws, rank_normalized: bool = False) -> float:
    """Effective sample size over split chains (Geyer initial monotone sequence).

    Not capped: antithetic chains can exceed the draw count.
    """
    x = _split(_as_chains(draws))
    if np.ptp(x) == 0:
        return np.nan
    if rank_normalized:
        x = _rank_normalize(x)
    return _ess(x)


@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    se_mean: float
    sd: float
    quantiles: tuple
    rhat: float
    ess_bulk: float

    def as_dict(self) -> dict:
        d = {"name": self.name, "mean": self.mean, "se_mean": self.se_mean, "sd": self.sd}
        for q, v in zip(QUANTILES, self.quantiles):
            d[f"q{q * 100:g}"] = v
        d["rhat"] = self.rhat
        d["ess_bulk"] = self.ess_bulk
        return d


@dataclass(frozen=True)
class DiagnosticsReport:
    rows: tuple

    def __getitem__(self, name: str) -> SummaryRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def converged(self, names=None, threshold: float = RHAT_THRESHOLD) -> dict[str, bool]:
        rows = self.rows if names is None else [self[n] for n in names]
        return {r.name: bool(r.rhat < threshold) for r in rows}


def summarize_draws(name: str, draws, rank_normalized: bool = False) -> SummaryRow:
    x = _as_chains(draws)
    flat = x.ravel()
    mean = float(flat.mean())
    sd = float(flat.std(ddof=1)) if flat.size > 1 else 0.0
    qs = tuple(float(v) for v in np.quantile(flat, QUANTILES, method="linear"))
    if sd == 0.0:
        return SummaryRow(name, mean, 0.0, 0.0, qs, np.nan, np.nan)
    rhat = split_rhat(x, rank_normalized)
    ess = min(ess_bulk(x, rank_normalized), float(flat.size))
    return SummaryRow(name, mean, sd / np.sqrt(ess), sd, qs, rhat, ess)


def summarize(samples: Union["PosteriorSamples", Mapping[str, np.ndarray]], rank_normalized: bool = False,
              include_fields: bool = True) -> DiagnosticsReport:
    """Per-quantity mean, se_mean, sd, quantiles, R-hat and capped ESS."""
    if hasattr(samples, "all_draws"):
        draws = samples.all_draws(include_fields)
    else:
        draws = samples
    if not draws:
        raise ValidationError("nothing to summarise")
    return DiagnosticsReport(tuple(summarize_draws(k, v, rank_normalized) for k, v in draws.items()))
