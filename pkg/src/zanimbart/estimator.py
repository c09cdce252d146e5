"""Scikit-learn style front end to the sampler."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .sampler import ModelConfig, predict, run_mcmc


class ZanimBART(BaseEstimator):
    """Zero-inflated count-compositional regression with BART forests.

    Parameters
    ----------
    variant : {'zanim-bart', 'zanim-ln-bart', 'multinomial-bart'}
    n_trees_theta, n_trees_zeta : int
        Trees per log-linear and per probit forest.
    iterations, burn_in, thin : int
    sparse_splits : bool
        Dirichlet sparsity prior on split probabilities.
    random_state : int
    n_jobs : int

    Attributes
    ----------
    draws_ : PosteriorDraws
    n_features_in_ : int
    n_categories_ : int

    Examples
    --------
    >>> est = ZanimBART(iterations=200, burn_in=100).fit(X, Y)  # doctest: +SKIP
    >>> theta = est.predict(X_new)  # doctest: +SKIP
    """

    def __init__(self, variant="zanim-bart", n_trees_theta=200, n_trees_zeta=200,
                 iterations=10000, burn_in=5000, thin=1, sparse_splits=False,
                 random_state=0, n_jobs=1):
        self.variant = variant
        self.n_trees_theta = n_trees_theta
        self.n_trees_zeta = n_trees_zeta
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.sparse_splits = sparse_splits
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return ModelConfig(variant=self.variant, m_theta=self.n_trees_theta,
                           m_zeta=self.n_trees_zeta, iterations=self.iterations,
                           burn_in=self.burn_in, thin=self.thin,
                           sparse_splits=self.sparse_splits, seed=int(self.random_state),
                           n_jobs=self.n_jobs, snapshot_trees=True).validate()

    def fit(self, X, Y):
        """Run the sampler on covariates ``X`` (n, p) and counts ``Y`` (n, d)."""
        X = check_array(X, dtype=float)
        Y = check_array(Y, dtype=None, ensure_min_features=2)
        if Y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if not np.all(np.equal(np.mod(Y, 1), 0)) or np.any(Y < 0):
            raise ValueError("Y must hold nonnegative integer counts")
        config = self._config()
        self.draws_ = run_mcmc(Y.astype(np.int64), X, config)
        self.n_features_in_ = X.shape[1]
        self.n_categories_ = Y.shape[1]
        return self

    def _draws_at(self, X):
        check_is_fitted(self, "draws_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict(self.draws_, X)

    def predict(self, X):
        """Posterior mean of the population compositional probabilities."""
        return self._draws_at(X)[0].mean(axis=0)

    def predict_zero_probability(self, X):
        """Posterior mean of the structural-zero probabilities."""
        return self._draws_at(X)[1].mean(axis=0)

    def predict_draws(self, X):
        """Per-draw ``(theta, zeta)`` arrays of shape (K, n, d)."""
        return self._draws_at(X)
