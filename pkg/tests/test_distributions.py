import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multinomial

from zanimbart.distributions import (EnumerationBudgetExceeded, ZanimLnParams, ZanimParams,
                                     marginal_moments, sample_zanim, sample_zanim_ln,
                                     zanim_ln_pmf_mc, zanim_logpmf, zanim_pmf, zanim_pmf_mc)

THETA = np.array([0.05, 0.70, 0.25])
ZETA = np.array([0.05, 0.15, 0.10])
ALPHA = np.array([0.031, 0.770, 0.241])
SIGMA = np.array([[0.5, -0.4, 0.1], [-0.4, 0.6, 0.3], [0.1, 0.3, 0.7]])


def simplex(d, N):
    for c in itertools.combinations_with_replacement(range(d), N):
        y = np.bincount(c, minlength=d)
        yield y


def brute_pmf(y, theta, zeta, N):
    """Sum over on/off configurations with scipy's multinomial."""
    y = np.asarray(y)
    d = y.size
    if y.sum() == 0:
        return float(np.prod(zeta))
    total = 0.0
    for z in itertools.product((0, 1), repeat=d):
        z = np.array(z)
        if np.any((y > 0) & (z == 0)) or z.sum() == 0:
            continue
        w = np.prod(np.where(z == 1, 1 - zeta, zeta))
        p = z * theta / np.sum(z * theta)
        total += w * multinomial.pmf(y, N, p)
    return total


def test_params_validation():
    with pytest.raises(ValueError):
        ZanimParams([0.5, 0.6], [0, 0], 3)
    with pytest.raises(ValueError):
        ZanimParams([0.5, 0.5], [0, 1.2], 3)
    with pytest.raises(ValueError):
        ZanimParams([1.0, 0.0], [0, 0], 3)
    with pytest.raises(ValueError):
        ZanimLnParams([1, 1], [0, 0], [[1, 2], [0, 1]], 3)
    with pytest.raises(ValueError):
        ZanimLnParams([1, 1], [0, 0], [[1, 0], [0, -1]], 3)


def test_sampler_all_absent():
    rng = np.random.default_rng(0)
    y = sample_zanim(ZanimParams(THETA, [1, 1, 1], 30), rng, size=1000)
    assert np.all(y == 0)


def test_sampler_reduces_to_multinomial():
    rng = np.random.default_rng(1)
    y = sample_zanim(ZanimParams([0.5, 0.5], [0, 0], 1), rng, size=200_000)
    f = np.mean(y[:, 0] == 1)
    assert abs(f - 0.5) < 3 * math.sqrt(0.25 / 200_000)


def test_sampler_rows_sum_to_n_or_zero():
    rng = np.random.default_rng(2)
    y = sample_zanim(ZanimParams(THETA, [0.6, 0.6, 0.6], 12), rng, size=5000)
    assert set(np.unique(y.sum(axis=1))) <= {0, 12}


def test_sampler_mean_matches_exact():
    rng = np.random.default_rng(3)
    p = ZanimParams(THETA, ZETA, 30)
    y = sample_zanim(p, rng, size=1_000_000)
    mm = marginal_moments(p)
    se = y.std(axis=0) / 1000.0
    assert np.all(np.abs(y.mean(axis=0) - mm.mean) < 3 * se)
    np.testing.assert_allclose(mm.mean, [2.320, 18.496, 9.161], atol=1e-3)


def test_ln_sampler_zero_covariance_is_zanim():
    p = ZanimLnParams(ALPHA, ZETA, np.zeros((3, 3)), 30)
    a = sample_zanim_ln(p, np.random.default_rng(4), size=200_000)
    b = sample_zanim(ZanimParams(ALPHA / ALPHA.sum(), ZETA, 30), np.random.default_rng(5),
                     size=200_000)
    se = np.sqrt(a.var(axis=0) / 2e5 + b.var(axis=0) / 2e5)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 4 * se)


def test_ln_sampler_table_setting():
    rng = np.random.default_rng(6)
    p = ZanimLnParams(ALPHA, ZETA, SIGMA, 30)
    y = sample_zanim_ln(p, rng, size=1_000_000)
    np.testing.assert_allclose(y.mean(axis=0), [2.320, 18.496, 9.161], rtol=0.02)
    assert abs(y[:, 0].var() / 19.002 - 1) < 0.02


def test_pmf_zero_zeta_is_multinomial():
    p = ZanimParams([0.2, 0.3, 0.5], [0, 0, 0], 5)
    for y in simplex(3, 5):
        assert zanim_pmf(y, p) == pytest.approx(multinomial.pmf(y, 5, p.theta), rel=1e-12)


def test_pmf_normalizes_on_small_instance():
    p = ZanimParams([0.2, 0.3, 0.5], [0.1, 0.2, 0.3], 5)
    total = zanim_pmf(np.zeros(3, int), p) + sum(zanim_pmf(y, p) for y in simplex(3, 5))
    assert abs(total - 1) < 1e-10


def test_pmf_matches_independent_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.integers(2, 5)
        th = rng.dirichlet(np.ones(d))
        ze = rng.random(d)
        N = int(rng.integers(1, 7))
        p = ZanimParams(th, ze, N)
        for y in simplex(d, N):
            assert zanim_pmf(y, p) == pytest.approx(brute_pmf(y, th, ze, N), rel=1e-10,
                                                    abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_pmf_normalization_property(d, N, seed):
    rng = np.random.default_rng(seed)
    th = rng.dirichlet(np.ones(d))
    ze = rng.random(d)
    p = ZanimParams(th, ze, N)
    total = zanim_pmf(np.zeros(d, int), p) + sum(zanim_pmf(y, p) for y in simplex(d, N))
    assert abs(total - 1) < 1e-10


def test_pmf_matches_sampler_frequency_point():
    p = ZanimParams([0.2, 0.3, 0.5], [0.1, 0.2, 0.3], 5)
    rng = np.random.default_rng(8)
    hits, total = 0, 0
    for _ in range(10):
        y = sample_zanim(p, rng, size=1_000_000)
        hits += int(np.sum((y[:, 0] == 5)))
        total += y.shape[0]
    pr = zanim_pmf([5, 0, 0], p)
    se = math.sqrt(pr * (1 - pr) / total)
    assert abs(hits / total - pr) < 3 * se


def test_sampler_pmf_agreement_all_support():
    p = ZanimParams([0.2, 0.3, 0.5], [0.1, 0.2, 0.3], 5)
    y = sample_zanim(p, np.random.default_rng(9), size=1_000_000)
    keys, counts = np.unique(y, axis=0, return_counts=True)
    freq = {tuple(k): c / y.shape[0] for k, c in zip(keys, counts)}
    for s in list(simplex(3, 5)) + [np.zeros(3, int)]:
        pr = zanim_pmf(s, p)
        se = math.sqrt(pr * (1 - pr) / y.shape[0])
        assert abs(freq.get(tuple(s), 0.0) - pr) < 4 * se + 1e-12


def test_pmf_support_errors():
    p = ZanimParams([0.5, 0.5], [0.1, 0.1], 4)
    with pytest.raises(ValueError):
        zanim_pmf([1, 2], p)
    with pytest.raises(ValueError):
        zanim_pmf([-1, 5], p)


def test_enumeration_budget():
    d = 8
    p = ZanimParams(np.full(d, 1 / d), np.full(d, 0.3), 4)
    y = np.zeros(d, int)
    y[0] = 4
    with pytest.raises(EnumerationBudgetExceeded):
        zanim_logpmf(y, p, max_exact_bits=5)
    est, se = zanim_pmf_mc(y, p, 200_000, np.random.default_rng(0))
    assert abs(est - zanim_pmf(y, p)) < 4 * se


def test_degenerate_zeta_forces_zero_and_n_inflation():
    p = ZanimParams(THETA, [0.3, 1.0, 1.0], 7)
    y = sample_zanim(p, np.random.default_rng(10), size=10000)
    assert set(np.unique(y[:, 0])) <= {0, 7}
    assert np.all(y[:, 1:] == 0)
    assert zanim_pmf([0, 7, 0], p) == 0.0


def test_ln_pmf_zero_covariance_exact():
    p = ZanimLnParams(ALPHA, ZETA, np.zeros((3, 3)), 6)
    q = ZanimParams(ALPHA / ALPHA.sum(), ZETA, 6)
    est, se = zanim_ln_pmf_mc([1, 3, 2], p, 50, np.random.default_rng(0))
    assert est == pytest.approx(zanim_pmf([1, 3, 2], q), rel=1e-12)
    assert se == pytest.approx(0.0, abs=1e-15)


def test_ln_pmf_stable_under_doubling():
    p = ZanimLnParams(ALPHA, ZETA, SIGMA, 30)
    y = [0, 30, 0]
    a, sa = zanim_ln_pmf_mc(y, p, 50_000, np.random.default_rng(1))
    b, sb = zanim_ln_pmf_mc(y, p, 100_000, np.random.default_rng(2))
    assert abs(a - b) < 3 * math.hypot(sa, sb)


def test_ln_pmf_zero_and_n_inflation_shape():
    p = ZanimLnParams(ALPHA, ZETA, SIGMA, 30)
    rng = np.random.default_rng(3)
    vals = [zanim_ln_pmf_mc([k, 30 - k, 0], p, 20_000, rng)[0] for k in range(31)]
    marg0 = sum(vals)
    # spike at Y_1 = 0 relative to interior values
    assert vals[0] > 5 * max(vals[5:25])
    assert marg0 > 0


def test_moments_table_values():
    mm = marginal_moments(ZanimParams(THETA, ZETA, 30))
    np.testing.assert_allclose(mm.mean, [2.320, 18.496, 9.161], atol=1e-3)
    np.testing.assert_allclose(mm.variance, [14.326, 69.178, 50.409], atol=1e-3)
    np.testing.assert_allclose(mm.dispersion_index, [6.174, 3.740, 5.502], atol=1e-3)
    np.testing.assert_allclose(mm.zi_index, [-0.873, 0.787, 0.337], atol=1e-3)


def test_moments_multinomial_limit():
    th = np.array([0.2, 0.3, 0.5])
    mm = marginal_moments(ZanimParams(th, np.zeros(3), 11))
    np.testing.assert_allclose(mm.mean, 11 * th, rtol=1e-12)
    np.testing.assert_allclose(mm.variance, 11 * th * (1 - th), rtol=1e-12)


def test_moments_match_brute_force():
    rng = np.random.default_rng(11)
    th = rng.dirichlet(np.ones(3))
    ze = rng.random(3)
    N = 6
    p = ZanimParams(th, ze, N)
    ys = list(simplex(3, N)) + [np.zeros(3, int)]
    pr = np.array([brute_pmf(y, th, ze, N) for y in ys])
    Y = np.array(ys)
    mean = pr @ Y
    var = pr @ Y ** 2 - mean ** 2
    mm = marginal_moments(p)
    np.testing.assert_allclose(mm.mean, mean, rtol=1e-10)
    np.testing.assert_allclose(mm.variance, var, rtol=1e-10)
    np.testing.assert_allclose(mm.prob_zero, pr @ (Y == 0), rtol=1e-10)


def test_ln_moments_table_values():
    mm = marginal_moments(ZanimLnParams(ALPHA, ZETA, SIGMA, 30), mc_draws=1_000_000,
                          rng=np.random.default_rng(12))
    np.testing.assert_allclose(mm.variance, [19.002, 86.981, 65.776], rtol=0.02)
    np.testing.assert_allclose(mm.mean, [2.320, 18.496, 9.161], rtol=0.02)


def test_zi_undefined_reported_as_nan():
    mm = marginal_moments(ZanimParams([0.5, 0.5], [1.0, 0.0], 4))
    assert np.isnan(mm.zi_index[0])
