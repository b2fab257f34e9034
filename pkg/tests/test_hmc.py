import itertools

import numpy as np
import pytest

from carmm.errors import NonFiniteDensity, ValidationError
from carmm.hmc import (
    FitConfig,
    adaptation_windows,
    chain_rng,
    hamiltonian,
    hmc_fit,
    initialize_chain,
    leapfrog,
    run_chain,
)
from carmm.model import ModelSpec
from carmm.simulate import make_lattice


class Gaussian:
    """Independent normal target with given scales."""

    def __init__(self, scales):
        self.scales = np.asarray(scales, dtype=float)
        self.dim = len(self.scales)

    def logp_and_grad(self, u):
        z = u / self.scales
        return -0.5 * float(z @ z), -z / self.scales


class Nowhere:
    dim = 2

    def logp_and_grad(self, u):
        return -np.inf, np.zeros(2)


class TestConfig:
    def test_defaults(self):
        c = FitConfig()
        assert (c.chains, c.iterations, c.warmup, c.draws, c.target_accept) == (4, 2500, 1250, 1250, 0.8)

    @pytest.mark.parametrize("kw", [dict(chains=0), dict(iterations=0), dict(warmup_fraction=1.0), dict(target_accept=1.0), dict(steps=0), dict(parameterization="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            FitConfig(**kw)


def test_standard_normal_moments():
    target = Gaussian([1.0, 1.0])
    config = FitConfig(iterations=2000, seed=11)
    draws = np.concatenate([run_chain(target, config, c).draws for c in range(4)])
    assert draws.shape == (4000, 2)
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(draws.var(axis=0), 1.0, atol=0.1)


def test_acceptance_near_target():
    scales = np.geomspace(0.1, 10, 50)
    config = FitConfig(iterations=1000, seed=2, trajectory_length=3.0)
    for target_accept, seed in itertools.product((0.65, 0.8, 0.9), (2, 3)):
        cfg = FitConfig(iterations=1000, seed=seed, trajectory_length=3.0, target_accept=target_accept)
        res = run_chain(Gaussian(scales), cfg, 0)
        assert abs(res.accept_stat.mean() - target_accept) < 0.1
    res = run_chain(Gaussian(scales), config, 0)
    # diagonal metric recovers the scales, up to the noise of a ~200 draw window
    ratio = np.sqrt(res.inv_metric) / scales
    assert abs(np.median(ratio) - 1) < 0.1
    np.testing.assert_allclose(ratio, 1.0, rtol=0.5)


def test_leapfrog_reversibility():
    rng = np.random.default_rng(0)
    target = Gaussian(rng.uniform(0.5, 2, 10))
    inv_metric = rng.uniform(0.5, 2, 10)
    q0, p0 = rng.normal(size=10), rng.normal(size=10)
    _, g0 = target.logp_and_grad(q0)
    q1, p1, _, g1 = leapfrog(target, q0, p0, g0, 0.1, 25, inv_metric)
    q2, p2, _, _ = leapfrog(target, q1, -p1, g1, 0.1, 25, inv_metric)
    np.testing.assert_allclose(q2, q0, atol=1e-8)
    np.testing.assert_allclose(-p2, p0, atol=1e-8)


def test_energy_conservation():
    rng = np.random.default_rng(1)
    target = Gaussian(rng.uniform(0.5, 2, 10))
    inv_metric = np.ones(10)
    q, p = rng.normal(size=10), rng.normal(size=10)
    lp, g = target.logp_and_grad(q)
    h0 = hamiltonian(lp, p, inv_metric)
    q1, p1, lp1, _ = leapfrog(target, q, p, g, 1e-3, 1000, inv_metric)
    assert abs(hamiltonian(lp1, p1, inv_metric) - h0) < 1e-4


def test_adaptation_windows():
    assert adaptation_windows(10) == []
    w = adaptation_windows(1000)
    assert w[0] == (75, 100) and w[-1][1] == 950
    assert all(a[1] == b[0] for a, b in zip(w, w[1:]))
    for warmup in (20, 50, 150, 750, 1250):
        w = adaptation_windows(warmup)
        assert w[0][0] >= 0 and w[-1][1] <= warmup
        assert all(s < e for s, e in w)


def test_rng_streams():
    a = chain_rng(5, 0).standard_normal(4)
    np.testing.assert_array_equal(a, chain_rng(5, 0).standard_normal(4))
    assert not np.array_equal(a, chain_rng(5, 1).standard_normal(4))
    assert not np.array_equal(a, chain_rng(5, 0, 1).standard_normal(4))
    assert not np.array_equal(a, chain_rng(6, 0).standard_normal(4))


def test_no_finite_start():
    with pytest.raises(NonFiniteDensity):
        run_chain(Nowhere(), FitConfig(iterations=10, max_init_tries=5))


class TestInitializeChain:
    @pytest.mark.parametrize("kind", ["gmcar", "mcar"])
    def test_constraints_hold(self, kind):
        g = make_lattice(4, 4)
        spec = ModelSpec(prior_kind=kind)
        rng = np.random.default_rng(0)
        for _ in range(50):
            initialize_chain(spec, g, rng, p=2).validate(spec, g)

    def test_determinism(self):
        g = make_lattice(3, 3)
        spec = ModelSpec()
        a = initialize_chain(spec, g, chain_rng(9, 0))
        b = initialize_chain(spec, g, chain_rng(9, 0))
        c = initialize_chain(spec, g, chain_rng(9, 1))
        np.testing.assert_array_equal(a.phi1, b.phi1)
        assert a.alpha1 == b.alpha1
        assert not np.array_equal(a.phi1, c.phi1)


# short smoke fits: too little warm-up for a stable step size
@pytest.mark.filterwarnings("ignore::carmm.errors.DivergenceRateExceeded")
class TestFit:
    def test_shapes(self, tiny_fit):
        sc, s = tiny_fit
        assert (s.chains, s.draws, s.n, s.m) == (2, 150, 16, 20)
        assert s.yrep1.dtype == np.int64 and (s.yrep1 >= 0).all()
        assert s.loglik.shape == (2, 150, 36)
        assert set(s.scalar_names) == {"alpha1", "alpha2", "tau1", "tau2", "eta0", "eta1", "gamma1", "gamma2", "psi1", "psi2"}

    def test_derived_identities(self, tiny_fit):
        sc, s = tiny_fit
        Hd = sc.H.dense()
        g1 = s.scalars["gamma1"][..., None]
        g2 = s.scalars["gamma2"][..., None]
        np.testing.assert_allclose(np.log(s.rho1), g1 + s.phi1, atol=1e-12)
        np.testing.assert_allclose(np.log(s.zeta2_risk), g2 + s.phi2, atol=1e-12)
        np.testing.assert_allclose(np.log(s.rho2), np.log(s.zeta2_risk) @ Hd.T, atol=1e-12)

    def test_seed_reproduces_draws(self, tiny_fit):
        sc, s = tiny_fit
        again = hmc_fit(sc.data, s.spec, sc.graph, sc.H, s.config)
        np.testing.assert_array_equal(again.unconstrained, s.unconstrained)
        np.testing.assert_array_equal(again.yrep2, s.yrep2)

    def test_thread_count_does_not_change_draws(self, tiny_fit, monkeypatch):
        sc, s = tiny_fit
        cfg = FitConfig(chains=2, iterations=60, seed=4, trajectory_length=2.0)
        monkeypatch.setenv("CARMM_THREADS", "1")
        a = hmc_fit(sc.data, s.spec, sc.graph, sc.H, cfg)
        monkeypatch.setenv("CARMM_THREADS", "2")
        b = hmc_fit(sc.data, s.spec, sc.graph, sc.H, cfg)
        np.testing.assert_array_equal(a.unconstrained, b.unconstrained)

    def test_covariate_fit_reports_normalised_beta(self):
        from carmm.simulate import simulate_scenario, study_truth

        truth = study_truth("gmcar", True)
        sc = simulate_scenario(truth, 3, 3, 10, np.random.default_rng(1))
        spec = truth.model_spec()
        assert spec.use_covariates
        s = hmc_fit(sc.data, spec, sc.graph, sc.H, FitConfig(chains=1, iterations=40, seed=0, trajectory_length=1.0))
        assert "beta1[1]" in s.scalars and "beta2[1]" in s.scalars
