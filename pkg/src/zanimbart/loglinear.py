"""Log-linear BART forests for the compositional probabilities.

Each category owns a forest whose fit is the product of the leaf values
``lambda`` reached by a row in every tree. Leaves carry Gamma(c0, d0)
priors calibrated so that ``E[log lambda] = 0`` and
``Var[log lambda] = a_lambda^2 / m``.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from . import _kernels as K
from ._slice import slice_sample
from .trees import DEFAULT_CAPACITY, MoveWeights, TreeEnsemble, TreePrior


class CalibrationError(ArithmeticError):
    """Newton iteration for the gamma leaf prior failed to converge."""


def calibrate_leaf_prior(m_theta, a_lambda, tol=1e-12, max_iter=100):
    """Gamma leaf hyperparameters for a target log-scale variance.

    Solves ``trigamma(c0) = a_lambda**2 / m_theta`` by Newton's method and
    sets ``d0 = exp(digamma(c0))``.

    Returns
    -------
    c0, d0 : float
    """
    if m_theta < 1 or not a_lambda > 0:
        raise ValueError("need m_theta >= 1 and a_lambda > 0")
    target = a_lambda ** 2 / m_theta
    c = 1.0 / target + 0.5
    for _ in range(max_iter):
        f = float(polygamma(1, c)) - target
        step = f / float(polygamma(2, c))
        new = c - step
        if new <= 0:
            new = c / 2.0
        if abs(new - c) <= tol * max(1.0, c):
            c = new
            break
        c = new
    else:
        raise CalibrationError(f"no convergence for target {target}")
    return c, math.exp(float(digamma(c)))


@dataclass
class GammaLeafPrior:
    """Gamma(c0, d0) leaf prior tied to ``a_lambda`` by calibration."""

    m_theta: int = 200
    a_lambda: float = 3.5 / math.sqrt(2.0)

    def __post_init__(self):
        self.set_a_lambda(self.a_lambda)

    def set_a_lambda(self, a_lambda):
        self.c0, self.d0 = calibrate_leaf_prior(self.m_theta, a_lambda)
        self.a_lambda = a_lambda


def suff_stats(leaf_of, y, z, u, phi, partial_fit, capacity=None):
    """Per-leaf sufficient statistics of one tree.

    Parameters
    ----------
    leaf_of : ndarray of int
        Leaf of each row in the tree.
    y, z, u : ndarray of shape (n,)
        Counts, at-risk indicators and random effects for the category.
    phi : ndarray of shape (n,)
    partial_fit : ndarray of shape (n,)
        Product of the other trees' leaf values.

    Returns
    -------
    r, s : ndarray
        Indexed by node: count totals and rate totals.
    """
    cap = capacity or int(leaf_of.max()) + 1
    r = np.bincount(leaf_of, weights=np.asarray(y, float), minlength=cap)
    s = np.bincount(leaf_of, weights=phi * z * np.exp(u) * partial_fit, minlength=cap)
    return r, s


def integrated_log_likelihood(tree, r, s, prior):
    """Sum over leaves of log int lambda^r e^{-s lambda} Gamma(lambda; c0, d0)."""
    c0, d0 = prior.c0, prior.d0
    lgc0 = math.lgamma(c0)
    return float(sum(K.leaf_log_marginal(K.GAMMA_LEAVES, r[t], s[t], c0, d0, lgc0, 1.0)
                     for t in tree.leaves()))


def gibbs_leaves(tree, r, s, prior, rng):
    """Draw every leaf from Gamma(r + c0, rate s + d0) in place."""
    for t in tree.leaves():
        tree.value[t] = max(rng.gamma(r[t] + prior.c0, 1.0 / (s[t] + prior.d0)), K.LEAF_FLOOR)
    return tree.value


class LogLinearForest:
    """Multiplicative forest with a cached log fit on the training rows.

    Parameters
    ----------
    m : int
        Number of trees.
    n : int
        Number of training rows.
    capacity : int
        Node capacity per tree.
    """

    def __init__(self, m, n, capacity=DEFAULT_CAPACITY):
        self.ensemble = TreeEnsemble(m, n, init_value=1.0, capacity=capacity)
        self.log_fit = np.zeros(n)

    @property
    def fit(self):
        return np.exp(self.log_fit)

    def recompute(self):
        """Rebuild the cached log fit from the trees."""
        ens = self.ensemble
        rows = np.arange(ens.leaf_of.shape[1])
        self.log_fit = np.log(ens.value[np.arange(ens.m)[:, None], ens.leaf_of]).sum(axis=0) \
            if rows.size else np.zeros(0)
        return self.log_fit

    def evaluate(self, X):
        """Forest value at each row of ``X`` (strictly positive)."""
        return np.exp(self.ensemble.predict_log_product(np.atleast_2d(X)))

    def log_evaluate(self, X):
        return self.ensemble.predict_log_product(np.atleast_2d(X))


def backfit_category(forest, data, y, base, probs, prior, rng, tree_prior=TreePrior(),
                     weights=MoveWeights(), scratch=None, counters=None, use_likelihood=True,
                     update_trees=True):
    """One backfitting sweep over all trees of a category's forest.

    Parameters
    ----------
    forest : LogLinearForest
    data : CovariateIndex
    y : ndarray of shape (n,)
        Counts for the category.
    base : ndarray of shape (n,)
        ``phi_i * z_ij * exp(u_ij)``.
    probs : SplitProbabilities
    prior : GammaLeafPrior
    rng : numpy.random.Generator
    use_likelihood : bool
        When False the sweep samples the prior.
    update_trees : bool
        When False only the leaves are redrawn.

    Returns
    -------
    counters : ndarray of int64
        Proposal/acceptance tallies (see :mod:`zanimbart._kernels`).
    """
    sc = scratch or data.scratch(forest.ensemble.capacity)
    if counters is None:
        counters = np.zeros(K.N_COUNTERS, np.int64)
    ens = forest.ensemble
    K.sweep_loglinear(*ens.arrays(), ens.leaf_of, data.X, data.xr, data.ux, data.nux, probs.s,
                      weights.grow, weights.prune, tree_prior.a, tree_prior.b,
                      np.asarray(y, float), np.asarray(base, float), forest.log_fit, prior.c0,
                      prior.d0, use_likelihood, update_trees, rng, sc.rows, sc.newleaf, sc.mark,
                      sc.stamp, sc.ncut, sc.flag, sc.stack, sc.slots, sc.flag2, sc.rows2, sc.acc, sc.sa, sc.sb,
                      sc.partial, sc.leafval, sc.flin, sc.plin, counters)
    return counters


def leaf_summary(forests):
    """Number of leaves, sum of log leaf values and sum of leaf values."""
    L, slog, s = 0, 0.0, 0.0
    for f in forests:
        v = f.ensemble.leaf_values()
        L += v.size
        slog += float(np.log(v).sum())
        s += float(v.sum())
    return L, slog, s


def gamma_leaf_loglik(a_lambda, m_theta, L, sum_log, sum_val):
    c0, d0 = calibrate_leaf_prior(m_theta, a_lambda)
    return L * (c0 * math.log(d0) - math.lgamma(c0)) + (c0 - 1.0) * sum_log - d0 * sum_val


def update_a_lambda(forests, prior, rng, summary=None):
    """Slice-sampling update of ``a_lambda`` under a half-Cauchy(0, 1) prior.

    Works on ``log a_lambda`` with unit stepping-out width and recalibrates
    ``(c0, d0)`` in place.

    Returns
    -------
    float
        The new ``a_lambda``.
    """
    L, slog, s = summary if summary is not None else leaf_summary(forests)

    def logpost(x):
        a = math.exp(x)
        if not 1e-8 < a < 1e8:
            return -math.inf
        try:
            ll = gamma_leaf_loglik(a, prior.m_theta, L, slog, s) if L else 0.0
        except CalibrationError:
            return -math.inf
        return ll - math.log1p(a * a) + x

    x = slice_sample(math.log(prior.a_lambda), logpost, rng, width=1.0)
    prior.set_a_lambda(math.exp(x))
    return prior.a_lambda


def evaluate(forest, x):
    """Forest value at a single covariate row."""
    return float(forest.evaluate(np.asarray(x, float)[None])[0])
