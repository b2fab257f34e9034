from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import logsumexp

from carmm.compare import (
    PARETO_K_WARN,
    dic,
    dic_from_draws,
    elpd_diff_se,
    fit_report,
    gpd_fit,
    loo_elpd,
    psis_smooth,
    saturated_deviance,
    tail_proportions,
    tap,
)
from carmm.errors import InvalidParameter, LengthMismatch


class TestDeviance:
    def test_saturated_fit_is_zero(self):
        y = np.array([0, 3, 10, 250])
        assert saturated_deviance(y[1:], y[1:].astype(float), 2.5) == 0.0

    def test_zero_count_hand_case(self):
        assert saturated_deviance([0], [2.0], 1.0) == pytest.approx(2 * np.log(3), abs=1e-14)

    def test_longhand(self):
        y, mu, psi = np.array([4, 0, 9]), np.array([2.5, 1.2, 11.0]), 3.3
        total = 0.0
        for yi, mi in zip(y, mu):
            first = yi * np.log(yi / mi) if yi > 0 else 0.0
            total += first - (yi + psi) * np.log((1 + yi / psi) / (1 + mi / psi))
        assert saturated_deviance(y, mu, psi) == pytest.approx(2 * total, rel=1e-13)

    def test_draw_axes_broadcast(self):
        rng = np.random.default_rng(0)
        y = rng.poisson(5, 6)
        mu = rng.uniform(1, 9, (4, 6))
        psi = rng.uniform(1, 9, 4)
        out = saturated_deviance(y, mu, psi)
        np.testing.assert_allclose(out, [saturated_deviance(y, mu[s], psi[s]) for s in range(4)], rtol=1e-14)

    def test_errors(self):
        with pytest.raises(InvalidParameter):
            saturated_deviance([1], [0.0], 1.0)
        with pytest.raises(LengthMismatch):
            saturated_deviance([1, 2], [1.0], 1.0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_deviance_minimised_at_y(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    y = rng.poisson(rng.uniform(0.5, 30), n)
    psi = rng.uniform(0.1, 50)
    mu = rng.uniform(0.01, 60, n)
    assert saturated_deviance(y, mu, psi) >= 0
    pos = y > 0
    if pos.any():
        at_y = saturated_deviance(y[pos], y[pos].astype(float), psi)
        assert at_y == 0.0
        bumped = y[pos] * np.exp(rng.normal(0, 0.1, pos.sum()))
        assert saturated_deviance(y[pos], bumped, psi) >= at_y


class TestDic:
    def test_single_repeated_draw(self):
        y = np.array([1, 4, 2])
        mu = np.tile([1.5, 3.0, 2.2], (5, 1))
        r = dic_from_draws(y, mu, np.full(5, 4.0))
        assert r.p_d == 0.0 and r.dic == r.d_bar

    def test_two_draw_hand_case(self):
        y = np.array([2, 5])
        mu = np.array([[1.0, 4.0], [3.0, 7.0]])
        psi = np.array([2.0, 6.0])

        def dev(m, p):
            return 2 * sum(
                (yi * np.log(yi / mi)) - (yi + p) * np.log((1 + yi / p) / (1 + mi / p)) for yi, mi in zip(y, m)
            )

        d_bar = 0.5 * (dev(mu[0], psi[0]) + dev(mu[1], psi[1]))
        d_hat = dev([2.0, 5.5], 4.0)
        r = dic_from_draws(y, mu, psi)
        assert r.d_bar == pytest.approx(d_bar, abs=1e-10)
        assert r.d_at_mean == pytest.approx(d_hat, abs=1e-10)
        assert r.p_d == pytest.approx(d_bar - d_hat, abs=1e-10)
        assert r.dic == pytest.approx(2 * d_bar - d_hat, abs=1e-10)

    def test_from_samples(self, tiny_fit):
        sc, s = tiny_fit
        r = dic(s, sc.data, 2)
        mu = sc.data.E2 * s.flat(s.rho2)
        assert r.d_bar == pytest.approx(np.mean(saturated_deviance(sc.data.y2, mu, s.flat(s.psi(2)))), rel=1e-12)
        with pytest.raises(InvalidParameter):
            dic(s, sc.data, 3)


class TestTap:
    def test_ties_count_half(self):
        y = np.array([3, 0, 7])
        np.testing.assert_array_equal(tap(y, np.tile(y, (10, 1))), 0.5)

    def test_all_below(self):
        np.testing.assert_array_equal(tap(np.array([5, 9]), np.array([[1, 2], [4, 8]])), 1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        y = rng.poisson(4, 8)
        yrep = rng.poisson(4, (37, 8))
        p = tap(y, yrep)
        for i in range(8):
            count = Fraction(0)
            for s in range(37):
                count += 1 if yrep[s, i] < y[i] else Fraction(1, 2) if yrep[s, i] == y[i] else 0
            assert Fraction(p[i]).limit_denominator(74) == count / 37

    def test_shape_check(self):
        with pytest.raises(LengthMismatch):
            tap(np.array([1, 2]), np.array([[1, 2, 3]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), S=st.integers(1, 60))
def test_tap_exact_rationals(seed, S):
    rng = np.random.default_rng(seed)
    y = rng.poisson(3, 5)
    p = tap(y, rng.poisson(3, (S, 5)))
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p * 2 * S, np.round(p * 2 * S), atol=1e-9)


class TestTailProportions:
    def test_centre(self):
        assert tail_proportions(np.full(10, 0.5)) == {0.05: 0.0, 0.1: 0.0}

    def test_example(self):
        assert tail_proportions([0.01, 0.99, 0.5, 0.5], [0.05])[0.05] == 0.5

    def test_out_of_range(self):
        with pytest.raises(InvalidParameter):
            tail_proportions([1.2])


class TestLoo:
    def test_constant_loglik(self):
        r = loo_elpd(np.full((400, 3), -1.7))
        np.testing.assert_allclose(r.pointwise, -1.7, atol=1e-12)
        assert r.looic == pytest.approx(2 * 3 * 1.7)

    def test_raw_importance_sampling(self):
        ll = np.log(np.array([[0.2, 0.5], [0.4, 0.1], [0.3, 0.3]]))
        r = loo_elpd(ll, smooth=False)
        for i in range(2):
            lik = np.exp(ll[:, i])
            oracle = np.log(1.0 / np.mean(1.0 / lik))
            assert r.pointwise[i] == pytest.approx(oracle, abs=1e-12)
        assert r.elpd_loo == pytest.approx(r.pointwise.sum(), abs=1e-15)

    def test_single_draw(self):
        row = np.array([[-1.0, -2.5, -0.3]])
        r = loo_elpd(row)
        assert r.elpd_loo == pytest.approx(row.sum(), abs=1e-14)

    def test_smoothing_caps_weights(self):
        rng = np.random.default_rng(2)
        lw = rng.standard_t(2, 1000)
        smoothed, k = psis_smooth(lw)
        assert np.isfinite(k)
        assert smoothed.max() <= 0.0
        # body of the distribution untouched
        order = np.argsort(lw)
        body = order[:800]
        np.testing.assert_allclose(smoothed[body], (lw - lw.max())[body])
        # order of the tail is preserved
        assert np.all(np.diff(smoothed[order[-200:]]) >= -1e-12)

    def test_short_tail_skips_smoothing(self):
        lw = np.arange(10.0)
        out, k = psis_smooth(lw)
        assert np.isnan(k)
        np.testing.assert_array_equal(out, lw)

    def test_heavy_tail_is_flagged(self):
        rng = np.random.default_rng(3)
        # likelihood values with a Pareto(1/k = 1) reciprocal tail
        ll = -np.log(rng.pareto(1.0, (2000, 1)) + 1.0)
        r = loo_elpd(ll)
        assert r.pareto_k[0] > PARETO_K_WARN
        assert list(r.flagged) == [0]

    def test_tied_draws_at_cutoff(self):
        # a stuck chain repeats one likelihood value across most of the tail
        rng = np.random.default_rng(9)
        ll = np.log(np.r_[np.full(700, 0.3), rng.uniform(0.01, 1, 300)])[:, None]
        r = loo_elpd(ll)
        assert np.isfinite(r.elpd_loo)
        assert r.pareto_k[0] > PARETO_K_WARN

    def test_non_finite(self):
        with pytest.raises(InvalidParameter):
            loo_elpd(np.array([[0.0, -np.inf]]))


@pytest.mark.parametrize("k", [0.1, 0.5, 0.9])
def test_gpd_shape_recovery(k):
    x = stats.genpareto(c=k, scale=2.0).rvs(size=20000, random_state=np.random.default_rng(4))
    khat, sigma = gpd_fit(x)
    assert khat == pytest.approx(k, abs=0.05)
    assert sigma == pytest.approx(2.0, rel=0.1)


def test_gpd_method_of_moments():
    x = stats.genpareto(c=0.2, scale=1.0).rvs(size=50000, random_state=np.random.default_rng(5))
    khat, _ = gpd_fit(x, method="moments")
    assert khat == pytest.approx(0.2, abs=0.05)
    with pytest.raises(InvalidParameter):
        gpd_fit(x, method="bogus")


class TestElpdDiff:
    def test_identical(self):
        a = np.random.default_rng(6).normal(size=20)
        assert elpd_diff_se(a, a) == (0.0, 0.0)

    def test_constant_shift(self):
        a = np.random.default_rng(7).normal(size=20)
        diff, se = elpd_diff_se(a + 0.25, a)
        assert diff == pytest.approx(20 * 0.25)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_direct_formula(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, 57))
        d = a - b
        n = len(d)
        var = sum((v - sum(d) / n) ** 2 for v in d) / (n - 1)
        diff, se = elpd_diff_se(a, b)
        assert diff == pytest.approx(sum(d), abs=1e-12)
        assert se == pytest.approx(np.sqrt(n * var), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            elpd_diff_se(np.zeros(3), np.zeros(4))


def test_fit_report_keys(tiny_fit):
    sc, s = tiny_fit
    rep = fit_report(s, sc.data)
    assert set(rep) == {"y1", "y2"}
    d = rep["y1"].as_dict()
    assert {"d_bar", "d_at_mean", "p_d", "dic", "elpd_loo", "looic", "tap_tail_05", "tap_tail_10"} <= set(d)
    assert d["p_d"] == pytest.approx(d["d_bar"] - d["d_at_mean"])
    assert d["looic"] == -2 * d["elpd_loo"]
    ll = s.flat(s.loglik)[:, : s.n]
    assert rep["y1"].loo.elpd_loo <= logsumexp(ll, axis=0).sum()
