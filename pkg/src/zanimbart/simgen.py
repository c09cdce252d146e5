"""Simulation designs with known truth."""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, ndtr


@dataclass
class SimulatedData:
    """Counts, covariates and the generating parameters.

    ``theta`` and ``zeta`` are the population-level truths (n, d); ``z`` are
    the at-risk indicators actually drawn.
    """

    Y: np.ndarray
    X: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray
    z: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.Y.sum(axis=1)


@dataclass
class Scenario1Config:
    n: int = 400
    d: int = 4
    n_min: int = 100
    n_max: int = 500
    n_interior_knots: int = 3
    beta0: tuple = (0.5, 1.0, 1.5, 2.0)


@dataclass
class Scenario2Config:
    n: int = 100
    d: int = 20
    p: int = 6
    n_min: int = 1000
    n_max: int = 5000
    tau: float = 0.01
    intercept_alpha: tuple = (-2.3, 2.3)
    intercept_zeta: tuple = (-0.1, 1.5)
    slope: tuple = (1.2, 1.8)
    share_covariates: bool = False


def cubic_bspline_basis(x, n_interior=3, lo=-1.0, hi=1.0):
    """Cubic B-spline design matrix with equally spaced interior knots."""
    inner = np.linspace(lo, hi, n_interior + 2)
    t = np.r_[[lo] * 3, inner, [hi] * 3]
    return BSpline.design_matrix(np.clip(x, lo, hi), t, 3).toarray()


def _zanim_rows(theta, zeta, N, rng):
    n, d = theta.shape
    z = (rng.random((n, d)) >= zeta).astype(np.int64)
    w = z * theta
    s = w.sum(axis=1, keepdims=True)
    empty = s[:, 0] <= 0
    pv = np.where(empty[:, None], 1.0 / d, w / np.where(empty[:, None], 1.0, s))
    Y = rng.multinomial(N, pv)
    Y[empty] = 0
    return Y, z


def gen_scenario1(config=None, rng=None):
    """One covariate on a uniform grid, spline log-fits and probit zeros.

    Parameters
    ----------
    config : Scenario1Config, optional
    rng : numpy.random.Generator

    Returns
    -------
    SimulatedData
    """
    c = config or Scenario1Config()
    rng = rng if rng is not None else np.random.default_rng()
    if len(c.beta0) != c.d:
        raise ValueError("beta0 must have one entry per category")
    x = np.linspace(-1.0, 1.0, c.n)
    S = cubic_bspline_basis(x, c.n_interior_knots)
    beta = rng.standard_normal((S.shape[1], c.d))
    logf = S @ beta
    theta = np.exp(logf - logf.max(axis=1, keepdims=True))
    theta /= theta.sum(axis=1, keepdims=True)
    zeta = ndtr(np.sin(2 * np.pi * x)[:, None] + x[:, None] ** 2 - np.asarray(c.beta0)[None])
    N = rng.integers(c.n_min, c.n_max + 1, size=c.n)
    Y, z = _zanim_rows(theta, zeta, N, rng)
    return SimulatedData(Y, x[:, None], theta, zeta, z, {"beta": beta})


def _slopes(rng, size, lo, hi):
    return rng.uniform(lo, hi, size) * rng.choice([-1.0, 1.0], size)


def _form(x1, x2, b0, b1):
    return b0 + b1 * x1 + np.sin(2 * np.pi * x2) + x2 ** 2 + x1 * x2


def gen_scenario2(config=None, rng=None, max_redraws=1000):
    """Misspecified overdispersed design with logit zeros and gamma noise.

    Each category uses two covariates (chosen at random, separately for the
    zero and the abundance parts unless ``share_covariates``) in
    g = b0 + b1 x1 + sin(2 pi x2) + x2^2 + x1 x2, with log alpha = g for the
    abundances and logit(1 - zeta) = g for the at-risk probability. Counts are multinomial on
    z * lambda with lambda ~ Gamma((1 - tau) / tau * alpha, 1). Rows whose z
    are all zero are redrawn.

    Returns
    -------
    SimulatedData
        ``info['active_alpha']`` and ``info['active_zeta']`` list the
        covariates used by each category.
    """
    c = config or Scenario2Config()
    rng = rng if rng is not None else np.random.default_rng()
    n, d, p = c.n, c.d, c.p
    X = rng.standard_normal((n, p))
    pick_a = np.array([rng.choice(p, 2, replace=False) for _ in range(d)])
    pick_z = pick_a.copy() if c.share_covariates else \
        np.array([rng.choice(p, 2, replace=False) for _ in range(d)])
    b0a = rng.uniform(*c.intercept_alpha, size=d)
    b0z = rng.uniform(*c.intercept_zeta, size=d)
    b1a = _slopes(rng, d, *c.slope)
    b1z = _slopes(rng, d, *c.slope)
    log_alpha = np.column_stack([_form(X[:, pick_a[j, 0]], X[:, pick_a[j, 1]], b0a[j], b1a[j])
                                 for j in range(d)])
    # the functional form is the log-odds of being at risk
    zeta = expit(-np.column_stack([_form(X[:, pick_z[j, 0]], X[:, pick_z[j, 1]], b0z[j], b1z[j])
                                   for j in range(d)]))
    alpha = np.exp(log_alpha)
    theta = alpha / alpha.sum(axis=1, keepdims=True)
    N = rng.integers(c.n_min, c.n_max + 1, size=n)
    z = (rng.random((n, d)) >= zeta).astype(np.int64)
    for _ in range(max_redraws):
        bad = z.sum(axis=1) == 0
        if not bad.any():
            break
        z[bad] = (rng.random((bad.sum(), d)) >= zeta[bad]).astype(np.int64)
    else:
        raise RuntimeError("could not draw an at-risk category for every row")
    lam = rng.gamma((1 - c.tau) / c.tau * alpha)
    w = z * lam
    # gamma draws with tiny shape can underflow; fall back to the largest alpha
    s = w.sum(axis=1, keepdims=True)
    zero = s[:, 0] <= 0
    if zero.any():
        w[zero] = z[zero] * alpha[zero]
        s = w.sum(axis=1, keepdims=True)
    Y = rng.multinomial(N, w / s)
    info = {"active_alpha": pick_a, "active_zeta": pick_z, "tau": c.tau}
    return SimulatedData(Y, X, theta, zeta, z, info)
