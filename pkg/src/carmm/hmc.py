"""Hamiltonian Monte Carlo with jittered fixed-length trajectories.

Warm-up follows the usual windowed scheme: step size by dual averaging,
diagonal inverse metric re-estimated at the end of each slow window.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .errors import DivergenceRateExceeded, NonFiniteDensity, ValidationError
from .graph import SpatialGraph
from .membership import MembershipMatrix
from .model import (
    CovariatePreprocess,
    Dataset,
    Design,
    ModelSpec,
    ParameterState,
    negbin_logpmf,
    preprocess_covariates,
    recover_beta,
)
from .target import PARAMETERIZATIONS, Posterior, Transform

THREADS_ENV = "CARMM_THREADS"


class Target(Protocol):
    dim: int

    def logp_and_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class FitConfig:
    """Sampler settings.

    ``steps`` fixes the nominal leapfrog count; when ``None`` it is derived
    from ``trajectory_length / step_size``. Either way each iteration draws
    its count uniformly from ``[ceil(steps/2), steps]`` and never exceeds
    ``2**max_tree_depth``. ``parameterization`` selects how the spatial
    fields are encoded (see :mod:`carmm.target`).
    """

    chains: int = 4
    iterations: int = 2500
    warmup_fraction: float = 0.5
    steps: Optional[int] = None
    trajectory_length: float = 6.0
    max_tree_depth: int = 10
    target_accept: float = 0.8
    seed: int = 0
    init_radius: float = 2.0
    max_init_tries: int = 100
    divergence_threshold: float = 1000.0
    max_divergence_rate: float = 0.05
    adapt_metric: bool = True
    threads: Optional[int] = None
    parameterization: str = "spectral"

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("need at least one chain")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValidationError("warmup_fraction must lie in [0, 1)")
        if self.iterations <= self.warmup:
            raise ValidationError("iterations must exceed the warm-up length")
        if not 0.0 < self.target_accept < 1.0:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.steps is not None and self.steps < 1:
            raise ValidationError("steps must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValidationError(f"unknown parameterization {self.parameterization!r}")

    @property
    def warmup(self) -> int:
        return int(self.iterations * self.warmup_fraction)

    @property
    def draws(self) -> int:
        return self.iterations - self.warmup

    @property
    def max_steps(self) -> int:
        return 2 ** self.max_tree_depth


def chain_rng(seed: int, chain: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, chain, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) % 2 ** 64, chain, stream])))


# --------------------------------------------------------------------------
# integrator and adaptation


def leapfrog(target: Target, q, p, grad, step_size, n_steps, inv_metric):
    """Integrate Hamilton's equations; returns ``(q, p, logp, grad)``."""
    q = q.copy()
    p = p + 0.5 * step_size * grad
    logp = -np.inf
    for k in range(n_steps):
        q = q + step_size * inv_metric * p
        logp, grad = target.logp_and_grad(q)
        if not np.isfinite(logp):
            return q, p, logp, grad
        if k < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p, logp, grad


def hamiltonian(logp, p, inv_metric) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        return -logp + 0.5 * float(p @ (inv_metric * p))


class DualAveraging:
    """Nesterov dual averaging of ``log(step_size)``."""

    def __init__(self, step_size, target, gamma=0.15, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.count = 0
        self.h_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat) -> float:
        self.count += 1
        t = self.count
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        x = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        w = t ** -self.kappa
        self.x_bar = w * x + (1.0 - w) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def adaptation_windows(warmup: int) -> list[tuple[int, int]]:
    """``(start, end)`` iteration ranges of the slow metric-adaptation windows."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    windows = []
    start = init
    size = base
    last = warmup - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start = end
        size *= 2
    return windows


def _reasonable_step_size(target, q, logp, grad, inv_metric, rng, step_size=1.0) -> float:
    p = rng.standard_normal(len(q)) / np.sqrt(inv_metric)
    h0 = hamiltonian(logp, p, inv_metric)

    def log_ratio(eps):
        _, p1, lp1, _ = leapfrog(target, q, p, grad, eps, 1, inv_metric)
        if not np.isfinite(lp1):
            return -np.inf
        return h0 - hamiltonian(lp1, p1, inv_metric)

    direction = 1 if log_ratio(step_size) > math.log(0.8) else -1
    for _ in range(60):
        new = step_size * (2.0 ** direction)
        lr = log_ratio(new)
        if (direction == 1 and not lr > math.log(0.8)) or (direction == -1 and lr > math.log(0.8)):
            return new if direction == -1 else step_size
        step_size = new
    return step_size


@dataclass
class ChainResult:
    draws: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_steps: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    init: np.ndarray


def initialize_unconstrained(target: Target, rng: np.random.Generator, radius=2.0, tries=100):
    """Uniform draw in ``[-radius, radius]^dim`` with a finite log-density and gradient."""
    for _ in range(tries):
        q = rng.uniform(-radius, radius, target.dim)
        logp, grad = target.logp_and_grad(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return q, logp, grad
    raise NonFiniteDensity(f"no finite initial point in {tries} tries")


def run_chain(target: Target, config: FitConfig, chain: int = 0, init=None) -> ChainResult:
    """Run one chain: warm-up adaptation followed by ``config.draws`` kept draws."""
    rng = chain_rng(config.seed, chain)
    if init is None:
        q, logp, grad = initialize_unconstrained(target, rng, config.init_radius, config.max_init_tries)
    else:
        q = np.asarray(init, dtype=float).copy()
        logp, grad = target.logp_and_grad(q)
        if not np.isfinite(logp):
            raise NonFiniteDensity("supplied initial point has non-finite log-density")
    q0 = q.copy()
    dim = target.dim
    inv_metric = np.ones(dim)
    step_size = _reasonable_step_size(target, q, logp, grad, inv_metric, rng)
    averager = DualAveraging(step_size, config.target_accept)

    warmup = config.warmup
    windows = adaptation_windows(warmup) if config.adapt_metric else []
    window_ends = {end for _, end in windows}
    window_draws: list[np.ndarray] = []

    n_keep = config.draws
    draws = np.empty((n_keep, dim))
    accept = np.empty(n_keep)
    divergent = np.zeros(n_keep, dtype=bool)
    steps_used = np.empty(n_keep, dtype=np.int64)

    for it in range(config.iterations):
        if config.steps is not None:
            nominal = config.steps
        else:
            nominal = math.ceil(config.trajectory_length / step_size)
        nominal = int(min(max(nominal, 1), config.max_steps))
        n_steps = int(rng.integers(math.ceil(nominal / 2), nominal + 1))

        p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
        h0 = hamiltonian(logp, p0, inv_metric)
        q1, p1, logp1, grad1 = leapfrog(target, q, p0, grad, step_size, n_steps, inv_metric)
        h1 = hamiltonian(logp1, p1, inv_metric) if np.isfinite(logp1) else np.inf
        delta = h1 - h0
        is_div = not np.isfinite(delta) or delta > config.divergence_threshold
        accept_stat = 0.0 if is_div else min(1.0, math.exp(-delta)) if delta > 0 else 1.0
        if not is_div and rng.uniform() < accept_stat:
            q, logp, grad = q1, logp1, grad1

        if it < warmup:
            step_size = averager.update(accept_stat)
            if windows and windows[0][0] <= it < windows[-1][1]:
                window_draws.append(q.copy())
                if it + 1 in window_ends:
                    sample = np.asarray(window_draws)
                    k = len(sample)
                    var = sample.var(axis=0, ddof=1) if k > 1 else np.ones(dim)
                    inv_metric = (k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0))
                    window_draws = []
                    step_size = _reasonable_step_size(target, q, logp, grad, inv_metric, rng, step_size)
                    averager.restart(step_size)
            if it == warmup - 1:
                step_size = averager.final
        else:
            k = it - warmup
            draws[k] = q
            accept[k] = accept_stat
            divergent[k] = is_div
            steps_used[k] = n_steps

    return ChainResult(draws, accept, divergent, steps_used, step_size, inv_metric, q0)


# --------------------------------------------------------------------------
# model fitting


@dataclass(eq=False)
class PosteriorSamples:
    """Post-warm-up draws with derived quantities; leading axes are ``(chain, draw)``."""

    spec: ModelSpec
    config: FitConfig
    scalars: dict[str, np.ndarray]
    unconstrained: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    rho1: np.ndarray
    zeta2_risk: np.ndarray
    rho2: np.ndarray
    yrep1: np.ndarray
    yrep2: np.ndarray
    loglik: np.ndarray
    accept_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def chains(self) -> int:
        return self.rho1.shape[0]

    @property
    def draws(self) -> int:
        return self.rho1.shape[1]

    @property
    def n(self) -> int:
        return self.rho1.shape[2]

    @property
    def m(self) -> int:
        return self.rho2.shape[2]

    @property
    def scalar_names(self) -> list[str]:
        return list(self.scalars)

    def flat(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape((-1,) + arr.shape[2:])

    def all_draws(self, include_fields: bool = True) -> dict[str, np.ndarray]:
        """Named ``(chain, draw)`` arrays for every reported parameter."""
        out = dict(self.scalars)
        if include_fields:
            for name, arr in (("phi1", self.phi1), ("phi2", self.phi2)):
                for i in range(arr.shape[2]):
                    out[f"{name}[{i + 1}]"] = arr[:, :, i]
        return out

    def psi(self, outcome: int) -> np.ndarray:
        return self.scalars[f"psi{outcome}"]


def scalar_names(spec: ModelSpec, p: int) -> list[str]:
    names = ["alpha"] if spec.prior_kind == "mcar" else ["alpha1", "alpha2"]
    names += ["tau1", "tau2", "eta0"]
    if spec.prior_kind == "gmcar":
        names.append("eta1")
    names += ["gamma1", "gamma2"]
    names += [f"beta1[{k + 1}]" for k in range(p)] + [f"beta2[{k + 1}]" for k in range(p)]
    names += ["psi1", "psi2"]
    return names


def state_scalars(state: ParameterState, spec: ModelSpec, design: Design) -> list[float]:
    vals = [state.alpha1] if spec.prior_kind == "mcar" else [state.alpha1, state.alpha2]
    vals += [state.tau1, state.tau2, state.eta0]
    if spec.prior_kind == "gmcar":
        vals.append(state.eta1)
    vals += [state.gamma1, state.gamma2]
    b1, b2 = state.beta1, state.beta2
    if isinstance(design, CovariatePreprocess):
        b1, b2 = recover_beta(b1, design), recover_beta(b2, design)
    vals += list(b1) + list(b2)
    vals += [state.psi1, state.psi2]
    return vals


def _derive_chain(post: Posterior, result: ChainResult, rng: np.random.Generator):
    n, m = post.graph.n, post.H.m
    S = len(result.draws)
    names = scalar_names(post.spec, post.layout.p)
    sc = np.empty((S, len(names)))
    phi1 = np.empty((S, n))
    phi2 = np.empty((S, n))
    rho1 = np.empty((S, n))
    zr = np.empty((S, n))
    rho2 = np.empty((S, m))
    yrep1 = np.empty((S, n), dtype=np.int64)
    yrep2 = np.empty((S, m), dtype=np.int64)
    loglik = np.empty((S, n + m))
    for s, u in enumerate(result.draws):
        state, zeta1, zeta2, lin2, mu1, mu2 = post.derived(u)
        sc[s] = state_scalars(state, post.spec, post.design)
        phi1[s] = state.phi1
        phi2[s] = state.phi2
        rho1[s] = np.exp(zeta1)
        zr[s] = np.exp(zeta2)
        rho2[s] = np.exp(lin2)
        yrep1[s] = rng.negative_binomial(state.psi1, state.psi1 / (state.psi1 + mu1))
        yrep2[s] = rng.negative_binomial(state.psi2, state.psi2 / (state.psi2 + mu2))
        loglik[s, :n] = negbin_logpmf(post.data.y1, mu1, state.psi1)
        loglik[s, n:] = negbin_logpmf(post.data.y2, mu2, state.psi2)
    return names, sc, phi1, phi2, rho1, zr, rho2, yrep1, yrep2, loglik


def _chain_task(args):
    post, config, chain = args
    result = run_chain(post, config, chain)
    derived = _derive_chain(post, result, chain_rng(config.seed, chain, 1))
    return result, derived


def _worker_count(config: FitConfig) -> int:
    cap = config.threads
    if cap is None:
        env = os.environ.get(THREADS_ENV)
        cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(cap), config.chains))


def hmc_fit(
    data: Dataset,
    spec: ModelSpec,
    graph: SpatialGraph,
    H: MembershipMatrix,
    config: FitConfig = FitConfig(),
    design: Design = None,
) -> PosteriorSamples:
    """Run ``config.chains`` independent chains and collect derived quantities."""
    if spec.use_covariates and design is None:
        if data.X is None:
            raise ValidationError("use_covariates is set but the dataset has no covariates")
        design = preprocess_covariates(data.X)
    if not spec.use_covariates:
        design = None
    post = Posterior(data, spec, graph, H, design, config.parameterization)
    tasks = [(post, config, c) for c in range(config.chains)]
    workers = _worker_count(config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_chain_task, tasks))
    else:
        outputs = [_chain_task(t) for t in tasks]

    results = [o[0] for o in outputs]
    derived = [o[1] for o in outputs]
    names = derived[0][0]
    stack = [np.stack([d[k] for d in derived]) for k in range(1, 10)]
    sc, phi1, phi2, rho1, zr, rho2, yrep1, yrep2, loglik = stack
    samples = PosteriorSamples(
        spec=spec,
        config=config,
        scalars={name: sc[:, :, k] for k, name in enumerate(names)},
        unconstrained=np.stack([r.draws for r in results]),
        phi1=phi1, phi2=phi2, rho1=rho1, zeta2_risk=zr, rho2=rho2,
        yrep1=yrep1, yrep2=yrep2, loglik=loglik,
        accept_rate=np.array([r.accept_stat.mean() for r in results]),
        divergences=np.array([int(r.divergent.sum()) for r in results]),
        step_size=np.array([r.step_size for r in results]),
    )
    rate = samples.divergences.sum() / (config.chains * config.draws)
    if rate > config.max_divergence_rate:
        warnings.warn(
            f"{samples.divergences.sum()} divergent transitions ({rate:.1%} of draws)",
            DivergenceRateExceeded,
            stacklevel=2,
        )
    return samples


def initialize_chain(
    spec: ModelSpec, graph: SpatialGraph, rng: np.random.Generator, p: int = 0, radius: float = 2.0
) -> ParameterState:
    """Draw a dispersed starting state (uniform on the unconstrained scale)."""
    tr = Transform(spec, graph, p)
    return tr.from_unconstrained(rng.uniform(-radius, radius, tr.layout.dim))
