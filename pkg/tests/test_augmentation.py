import math

import numpy as np
import pytest
from scipy import stats

from zanimbart.augmentation import LatentState, phi_rate, update_phi, update_w, update_z


def test_phi_moments_and_zero_rows():
    rng = np.random.default_rng(0)
    z = np.array([[1, 1, 0], [1, 0, 1], [0, 0, 0]])
    fit = np.array([[2.0, 1.0, 5.0], [0.5, 3.0, 1.5], [1.0, 1.0, 1.0]])
    u = np.zeros((3, 3))
    N = np.array([7, 3, 0])
    rate = phi_rate(z, fit, u)
    np.testing.assert_allclose(rate, [3.0, 2.0, 0.0])
    draws = np.array([update_phi(N, z, fit, u, rng) for _ in range(100_000)])
    assert np.all(draws[:, 2] == 0)
    for i in range(2):
        m, v = N[i] / rate[i], N[i] / rate[i] ** 2
        assert abs(draws[:, i].mean() - m) < 3 * math.sqrt(v / draws.shape[0])
        assert abs(draws[:, i].var() / v - 1) < 0.03


def test_phi_uses_random_effects():
    z = np.ones((1, 2))
    fit = np.ones((1, 2))
    u = np.array([[0.3, -0.3]])
    assert phi_rate(z, fit, u)[0] == pytest.approx(math.exp(0.3) + math.exp(-0.3))


def test_phi_clamp_event_and_error():
    events = {}
    rng = np.random.default_rng(1)
    phi = update_phi(np.array([4]), np.ones((1, 1)), np.array([[1e-320]]), np.zeros((1, 1)),
                     rng, events)
    assert events["phi_rate_clamped"] == 1 and np.isfinite(phi[0])
    with pytest.raises(RuntimeError):
        update_phi(np.array([4]), np.zeros((1, 2)), np.ones((1, 2)), np.zeros((1, 2)), rng)


def test_z_forced_where_positive():
    rng = np.random.default_rng(2)
    y = np.array([3, 1, 5])
    z = update_z(y, np.zeros(3), np.full(3, 5.0), np.ones(3), np.zeros(3), rng)
    np.testing.assert_array_equal(z, 1)


@pytest.mark.parametrize("f0,lam,phi,u", [(0.0, 1.0, 1.0, 0.0), (-0.5, 2.0, 0.3, 0.4),
                                          (1.0, 0.2, 4.0, -0.7)])
def test_z_matches_joint_simulation(f0, lam, phi, u):
    rng = np.random.default_rng(3)
    n = 200_000
    # oracle: simulate (z, y) jointly and condition on y = 0
    zs = rng.random(n) > stats.norm.cdf(f0)
    ys = rng.poisson(phi * math.exp(u) * lam * zs)
    ref = zs[ys == 0].mean()
    k = n
    z = update_z(np.zeros(k, np.int64), np.full(k, math.log(lam)), np.full(k, f0),
                 np.full(k, phi), np.full(k, u), rng)
    se = math.sqrt(ref * (1 - ref) / np.sum(ys == 0) + ref * (1 - ref) / k)
    assert abs(z.mean() - ref) < 4 * se


def test_w_support_and_half_normal():
    rng = np.random.default_rng(4)
    n = 200_000
    w1 = update_w(np.ones(n, np.int64), np.zeros(n), rng)
    w0 = update_w(np.zeros(n, np.int64), np.zeros(n), rng)
    assert np.all(w1 <= 0) and np.all(w0 >= 0)
    se = math.sqrt((1 - 2 / math.pi) / n)
    assert abs(w1.mean() + math.sqrt(2 / math.pi)) < 4 * se
    assert abs(w0.mean() - math.sqrt(2 / math.pi)) < 4 * se


def test_w_far_tail_is_finite():
    rng = np.random.default_rng(5)
    w = update_w(np.array([1, 0]), np.array([12.0, -12.0]), rng)
    assert w[0] <= 0 and w[1] >= 0 and np.all(np.isfinite(w))
    assert w[0] > -0.5 and w[1] < 0.5


def test_w_marginalizes_to_normal():
    rng = np.random.default_rng(6)
    n = 100_000
    f0 = 0.4
    z = (rng.random(n) > stats.norm.cdf(f0)).astype(np.int64)
    w = update_w(z, np.full(n, f0), rng)
    assert stats.kstest(w, stats.norm(loc=f0).cdf).pvalue > 1e-3


def test_latent_state_check():
    Y = np.array([[2, 0], [0, 0]])
    u = np.zeros((2, 2))
    ok = LatentState(np.ones(2), np.array([[1, 0], [1, 1]]), np.array([[-1.0, 0.5], [-0.1, -2]]), u)
    ok.check(Y)
    bad = LatentState(np.ones(2), np.array([[0, 0], [1, 1]]), np.array([[1.0, 0.5], [-1, -1]]), u)
    with pytest.raises(AssertionError):
        bad.check(Y)
