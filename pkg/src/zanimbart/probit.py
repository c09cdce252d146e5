"""Probit BART forests for the structural-zero probabilities.

``zeta(x) = Phi(sum_h g(x; T_h, M_h))`` with independent Normal(0, sigma_mu^2)
leaves, ``sigma_mu = scale / (k sqrt(m))``. With the default scale 3 and
k = 2 the prior fit is Normal(0, 1.5^2), so it lies in (-3, 3) with
probability about 0.95.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import ndtr

from . import _kernels as K
from .trees import DEFAULT_CAPACITY, MoveWeights, TreeEnsemble, TreePrior


@dataclass
class NormalLeafPrior:
    m_zeta: int = 200
    k: float = 2.0
    scale: float = 3.0

    @property
    def sigma_mu(self):
        return self.scale / (self.k * math.sqrt(self.m_zeta))


def partial_residuals(w, fit, tree_contribution):
    """Residuals of the latents against every tree but one."""
    return w - (fit - tree_contribution)


def leaf_stats(leaf_of, residuals, capacity=None):
    """Per-node row counts and residual sums."""
    cap = capacity or int(leaf_of.max()) + 1
    n = np.bincount(leaf_of, minlength=cap).astype(float)
    s = np.bincount(leaf_of, weights=residuals, minlength=cap)
    return n, s


def integrated_log_likelihood(tree, n, s, prior):
    """Sum over leaves of -0.5 log(n sig2 + 1) + sig2 s^2 / (2 (n sig2 + 1))."""
    sig2 = prior.sigma_mu ** 2
    return float(sum(K.leaf_log_marginal(K.NORMAL_LEAVES, n[t], s[t], 1.0, 1.0, 0.0, sig2)
                     for t in tree.leaves()))


def gibbs_leaves(tree, n, s, prior, rng):
    """Draw every leaf from Normal(s / (n + 1/sig2), 1 / (n + 1/sig2)) in place."""
    sig2 = prior.sigma_mu ** 2
    for t in tree.leaves():
        prec = n[t] + 1.0 / sig2
        tree.value[t] = s[t] / prec + rng.standard_normal() / math.sqrt(prec)
    return tree.value


class ProbitForest:
    """Additive forest with a cached fit on the training rows."""

    def __init__(self, m, n, capacity=DEFAULT_CAPACITY):
        self.ensemble = TreeEnsemble(m, n, init_value=0.0, capacity=capacity)
        self.fit = np.zeros(n)

    def recompute(self):
        ens = self.ensemble
        self.fit = ens.value[np.arange(ens.m)[:, None], ens.leaf_of].sum(axis=0)
        return self.fit

    def evaluate(self, X):
        """Additive fit at each row of ``X``."""
        return self.ensemble.predict_sum(np.atleast_2d(X))

    def evaluate_zeta(self, X):
        return ndtr(self.evaluate(X))


def evaluate_zeta(forest, x):
    """Structural-zero probability at a single covariate row."""
    return float(forest.evaluate_zeta(np.asarray(x, float)[None])[0])


def backfit_category(forest, data, w, probs, prior, rng, tree_prior=TreePrior(),
                     weights=MoveWeights(), scratch=None, counters=None, use_likelihood=True,
                     update_trees=True):
    """One backfitting sweep of a probit forest against latents ``w``.

    Returns
    -------
    counters : ndarray of int64
    """
    sc = scratch or data.scratch(forest.ensemble.capacity)
    if counters is None:
        counters = np.zeros(K.N_COUNTERS, np.int64)
    ens = forest.ensemble
    K.sweep_probit(*ens.arrays(), ens.leaf_of, data.X, data.xr, data.ux, data.nux, probs.s,
                   weights.grow, weights.prune, tree_prior.a, tree_prior.b,
                   np.asarray(w, float), forest.fit, prior.sigma_mu ** 2, use_likelihood,
                   update_trees, rng, sc.rows, sc.newleaf, sc.mark, sc.stamp, sc.ncut, sc.flag,
                   sc.stack, sc.slots, sc.flag2, sc.rows2, sc.acc, sc.sa, sc.sb, sc.partial, counters)
    return counters
