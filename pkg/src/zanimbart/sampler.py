"""MCMC for ZANIM-BART, ZANIM-LN-BART and the multinomial-BART special case.

Every random block owns a persistent stream derived from the master seed
and a ``(block, category)`` key, so results do not depend on how category
work is spread over threads, and switching a block off leaves the others'
draws untouched.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import math

import numpy as np
from scipy.special import ndtr

from . import _kernels as K
from .augmentation import update_phi
from .loglinear import GammaLeafPrior, LogLinearForest, leaf_summary, update_a_lambda
from .probit import NormalLeafPrior, ProbitForest
from .random_effects import (FactorHyper, FactorState, build_basis, ledermann_bound,
                             update_factors, update_v_ess)
from .trees import (DEFAULT_CAPACITY, CovariateIndex, MoveWeights, SplitProbabilities,
                    TreePrior, update_split_probabilities)

VARIANTS = ("zanim-bart", "zanim-ln-bart", "multinomial-bart")
LEVELS = ("theta", "zeta")

# stream keys
B_PHI, B_Z, B_W, B_LOGLIN, B_PROBIT, B_RE, B_ALAMBDA, B_SPLIT, B_INIT = range(9)


class NumericFailure(ArithmeticError):
    """A sampler block produced a non-finite or invalid state."""


def stream(seed, *key):
    """Independent generator for a block key."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class ModelConfig:
    """Sampler settings.

    Attributes
    ----------
    variant : str
        One of ``zanim-bart``, ``zanim-ln-bart`` or ``multinomial-bart``.
    m_theta, m_zeta : int
        Trees per log-linear and probit forest.
    iterations, burn_in, thin : int
        Total iterations, discarded iterations and thinning interval.
    seed : int
    sparse_splits : bool
        Dirichlet sparsity prior on the covariate split probabilities.
    n_jobs : int
        Worker threads for category-level work.
    snapshot_trees : bool
        Keep the trees of every stored iteration (needed for prediction).
    use_likelihood : bool
        False samples the prior (data enter only through their covariates).
    zeta_fit_override : float or None
        Fix every probit fit at this value instead of sampling the forests.
    freeze_random_effects : bool
        Keep ``u = 0`` in the logistic-normal variant.
    """

    variant: str = "zanim-bart"
    m_theta: int = 200
    m_zeta: int = 200
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    sparse_splits: bool = False
    tree_a: float = 0.95
    tree_b: float = 2.0
    k: float = 2.0
    probit_scale: float = 3.0
    a_lambda: float = 3.5 / math.sqrt(2.0)
    update_a_lambda: bool = True
    move_grow: float = 0.28
    move_prune: float = 0.28
    move_change: float = 0.44
    factor: FactorHyper = field(default_factory=FactorHyper)
    n_jobs: int = 1
    snapshot_trees: bool = False
    capacity: int = DEFAULT_CAPACITY
    use_likelihood: bool = True
    zeta_fit_override: float = None
    freeze_random_effects: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.m_theta < 1 or self.m_zeta < 1:
            raise ValueError("tree counts must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")
        if self.capacity < 3:
            raise ValueError("capacity must be >= 3")
        MoveWeights(self.move_grow, self.move_prune, self.move_change)
        TreePrior(self.tree_a, self.tree_b)
        return self

    def to_dict(self):
        return asdict(self)

    @property
    def kept(self):
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class PosteriorDraws:
    """Stored states, one entry per kept iteration.

    Attributes
    ----------
    iteration : ndarray of shape (K,)
    theta : ndarray of shape (K, n, d)
        Subject-level compositional probabilities softmax(log f + u).
    theta_population : ndarray of shape (K, n, d)
        softmax(log f) (equals ``theta`` unless random effects are present).
    zeta : ndarray of shape (K, n, d)
    z : ndarray of int8, shape (K, n, d)
    u : ndarray of shape (K, n, d) or None
    a_lambda : ndarray of shape (K,)
    usage : ndarray of bool, shape (K, d, 2, p)
        Whether each covariate appears in any splitting rule of the
        (category, level) ensemble; level 0 is theta, 1 is zeta.
    snapshots : list or None
        Per kept iteration, ``snapshots[k][j][level]`` is the compact
        ensemble tuple from :func:`zanimbart._kernels.compact_ensemble`.
    counters : ndarray of int64, shape (d, 2, N_COUNTERS)
    events : dict
    """

    variant: str
    iteration: np.ndarray
    theta: np.ndarray
    theta_population: np.ndarray
    zeta: np.ndarray
    z: np.ndarray
    u: np.ndarray
    a_lambda: np.ndarray
    usage: np.ndarray
    snapshots: list
    counters: np.ndarray
    events: dict
    zeta_fit_override: float = None

    @property
    def n_kept(self):
        return self.iteration.shape[0]

    def fitted_composition(self):
        """In-sample vartheta = z theta / sum z theta per kept iteration."""
        w = self.z * self.theta
        s = w.sum(axis=2, keepdims=True)
        return np.divide(w, s, out=np.zeros_like(w), where=s > 0)

    def acceptance_rates(self):
        c = self.counters.sum(axis=(0, 1))
        out = {}
        for i, name in enumerate(("grow", "prune", "change")):
            prop = int(c[K.C_PROPOSED + i])
            out[name] = float(c[K.C_ACCEPTED + i] / prop) if prop else 0.0
        return out


def _softmax_rows(L):
    L = L - L.max(axis=-1, keepdims=True)
    e = np.exp(L)
    return e / e.sum(axis=-1, keepdims=True)


class SamplerState:
    """Full state of the chain plus the per-block streams and work arrays."""

    def __init__(self, Y, X, config):
        config.validate()
        Y = np.ascontiguousarray(Y, dtype=np.int64)
        self.config = config
        self.n, self.d = Y.shape
        self.data = CovariateIndex(X)
        if self.data.n != self.n:
            raise ValueError("counts and covariates have different row counts")
        self.p = self.data.p
        self.Yt = np.ascontiguousarray(Y.T)
        self.N = Y.sum(axis=1)
        c = config
        self.zanim = c.variant != "multinomial-bart"
        self.ln = c.variant == "zanim-ln-bart" and not c.freeze_random_effects
        self.probit_active = self.zanim and c.zeta_fit_override is None
        self.tree_prior = TreePrior(c.tree_a, c.tree_b)
        self.weights = MoveWeights(c.move_grow, c.move_prune, c.move_change)
        self.gamma_prior = GammaLeafPrior(c.m_theta, c.a_lambda)
        self.normal_prior = NormalLeafPrior(c.m_zeta, c.k, c.probit_scale)
        seed = c.seed
        d = self.d
        self.rng_phi = stream(seed, B_PHI)
        self.rng_z = [stream(seed, B_Z, j) for j in range(d)]
        self.rng_w = [stream(seed, B_W, j) for j in range(d)]
        self.rng_c = [stream(seed, B_LOGLIN, j) for j in range(d)]
        self.rng_0 = [stream(seed, B_PROBIT, j) for j in range(d)]
        self.rng_re = stream(seed, B_RE)
        self.rng_alam = stream(seed, B_ALAMBDA)
        self.rng_split = [[stream(seed, B_SPLIT, j, lev) for lev in range(2)] for j in range(d)]
        self.forests = [LogLinearForest(c.m_theta, self.n, c.capacity) for _ in range(d)]
        self.probits = [ProbitForest(c.m_zeta, self.n, c.capacity) for _ in range(d)]
        self.probs = [[SplitProbabilities(self.p, sparse=c.sparse_splits) for _ in range(2)]
                      for _ in range(d)]
        self.scratch_c = [self.data.scratch(c.capacity) for _ in range(d)]
        self.scratch_0 = [self.data.scratch(c.capacity) for _ in range(d)]
        self.counters = np.zeros((d, 2, K.N_COUNTERS), np.int64)
        self.events = {"phi_rate_clamped": 0}
        self.Zt = np.ones((d, self.n), np.int64)
        self.Wt = np.zeros((d, self.n))
        self.Ut = np.zeros((d, self.n))
        self.phi = np.zeros(self.n)
        self.B = build_basis(d)
        self.factors = None
        self.V = np.zeros((self.n, d - 1))
        self._init_latents()

    # initialization -------------------------------------------------------
    def _init_latents(self):
        c = self.config
        seed = c.seed
        if self.zeta_fit_value() is not None:
            zeta0 = float(ndtr(self.zeta_fit_value()))
        else:
            zeta0 = 0.5
        for j in range(self.d):
            r = stream(seed, B_INIT, j)
            if self.zanim:
                z = (r.random(self.n) >= zeta0).astype(np.int64)
                z[self.Yt[j] > 0] = 1
                self.Zt[j] = z
        if self.ln:
            r = stream(seed, B_INIT, self.d)
            D = self.d - 1
            self.factors = FactorState.from_prior(D, self.n, r, c.factor, ledermann_bound(D))
            self.V = self.factors.draw_v(self.n, r)
            self.Ut = np.ascontiguousarray((self.V @ self.B.T).T)
        if c.use_likelihood:
            self.phi = update_phi(self.N, self.Zt.T, self.fit().T, self.Ut.T,
                                  stream(seed, B_INIT, self.d + 1), self.events)

    def zeta_fit_value(self):
        return self.config.zeta_fit_override

    # helpers --------------------------------------------------------------
    def fit(self):
        """Log-linear forest fits, shape (d, n)."""
        return np.exp(np.array([f.log_fit for f in self.forests]))

    def log_fit(self):
        return np.array([f.log_fit for f in self.forests])

    def probit_fit(self, j):
        if self.zeta_fit_value() is not None:
            return np.full(self.n, float(self.zeta_fit_value()))
        return self.probits[j].fit

    def zeta(self):
        """Structural-zero probabilities, shape (d, n)."""
        if not self.zanim:
            return np.zeros((self.d, self.n))
        return ndtr(np.array([self.probit_fit(j) for j in range(self.d)]))

    # one iteration ----------------------------------------------------------
    def _category(self, j):
        c = self.config
        y = self.Yt[j]
        forest = self.forests[j]
        use_lik = c.use_likelihood
        if self.zanim:
            f0 = self.probit_fit(j)
            if use_lik:
                K.draw_z(y, forest.log_fit, f0, self.phi, self.Ut[j], self.rng_z[j], self.Zt[j])
            else:
                K.draw_z(np.zeros(self.n, np.int64), forest.log_fit, f0, np.zeros(self.n),
                         self.Ut[j], self.rng_z[j], self.Zt[j])
            if self.probit_active:
                K.draw_w(self.Zt[j], f0, self.rng_w[j], self.Wt[j])
        base = self.phi * self.Zt[j] * np.exp(self.Ut[j])
        sc = self.scratch_c[j]
        ens = forest.ensemble
        data = self.data
        tp = self.tree_prior
        K.sweep_loglinear(*ens.arrays(), ens.leaf_of, data.X, data.xr, data.ux, data.nux,
                          self.probs[j][0].s, self.weights.grow, self.weights.prune, tp.a, tp.b,
                          y.astype(float), base, forest.log_fit, self.gamma_prior.c0,
                          self.gamma_prior.d0, use_lik, True, self.rng_c[j], sc.rows,
                          sc.newleaf, sc.mark, sc.stamp, sc.ncut, sc.flag, sc.stack, sc.slots,
                          sc.flag2, sc.rows2, sc.acc, sc.sa, sc.sb, sc.partial, sc.leafval,
                          sc.flin, sc.plin, self.counters[j, 0])
        if self.probit_active:
            pf = self.probits[j]
            ens = pf.ensemble
            sc = self.scratch_0[j]
            K.sweep_probit(*ens.arrays(), ens.leaf_of, data.X, data.xr, data.ux, data.nux,
                           self.probs[j][1].s, self.weights.grow, self.weights.prune, tp.a,
                           tp.b, self.Wt[j], pf.fit, self.normal_prior.sigma_mu ** 2, True,
                           True, self.rng_0[j], sc.rows, sc.newleaf, sc.mark, sc.stamp,
                           sc.ncut, sc.flag, sc.stack, sc.slots, sc.flag2, sc.rows2, sc.acc,
                           sc.sa, sc.sb, sc.partial, self.counters[j, 1])

    def step(self, pool=None):
        """Run one full iteration in the documented block order."""
        c = self.config
        if c.use_likelihood:
            self.phi = update_phi(self.N, self.Zt.T, self.fit().T, self.Ut.T, self.rng_phi,
                                  self.events)
        if pool is None:
            for j in range(self.d):
                self._category(j)
        else:
            list(pool.map(self._category, range(self.d)))
        if self.ln:
            if c.use_likelihood:
                self.V = update_v_ess(self.V, self.B, self.Yt.T, self.Zt.T, self.fit().T,
                                      self.factors, self.rng_re)
            else:
                self.V = update_v_ess(self.V, self.B, self.Yt.T, self.Zt.T, self.fit().T,
                                      self.factors, self.rng_re,
                                      loglik=lambda Vs, rows: np.zeros(rows.size))
            self.Ut = np.ascontiguousarray((self.V @ self.B.T).T)
            update_factors(self.factors, self.V, self.rng_re)
        if c.update_a_lambda:
            update_a_lambda(self.forests, self.gamma_prior, self.rng_alam,
                            leaf_summary(self.forests))
        self.split_counts = np.zeros((self.d, 2, self.p), np.int64)
        for j in range(self.d):
            self.split_counts[j, 0] = self.forests[j].ensemble.split_counts(self.p)
            if self.probit_active:
                self.split_counts[j, 1] = self.probits[j].ensemble.split_counts(self.p)
        if c.sparse_splits:
            for j in range(self.d):
                for lev in range(2 if self.probit_active else 1):
                    update_split_probabilities(self.split_counts[j, lev], self.probs[j][lev],
                                               self.rng_split[j][lev])
        self._check()

    def _check(self):
        for f in self.forests:
            if not np.all(np.isfinite(f.log_fit)):
                raise NumericFailure("log-linear fit became non-finite")
        if self.probit_active:
            for f in self.probits:
                if not np.all(np.isfinite(f.fit)):
                    raise NumericFailure("probit fit became non-finite")
        if not np.all(np.isfinite(self.phi)):
            raise NumericFailure("phi became non-finite")

    def snapshot(self):
        out = []
        for j in range(self.d):
            pair = []
            for ens in (self.forests[j].ensemble, self.probits[j].ensemble):
                pair.append(K.compact_ensemble(ens.var, ens.cut, ens.left, ens.right, ens.depth,
                                               ens.value))
            out.append(pair)
        return out


def init_state(Y, X, config):
    """Initial state: stumps with lambda = 1 and mu = 0, z from its prior."""
    return SamplerState(Y, X, config)


def run_mcmc(Y, X, config, callback=None):
    """Run the chain and collect the kept iterations.

    Parameters
    ----------
    Y : array-like of shape (n, d)
        Counts.
    X : array-like of shape (n, p)
        Covariates.
    config : ModelConfig
    callback : callable, optional
        Called as ``callback(iteration, state)`` after every iteration.

    Returns
    -------
    PosteriorDraws
    """
    state = init_state(Y, X, config)
    c = state.config
    n, d, p = state.n, state.d, state.p
    Kk = c.kept
    it_idx = np.empty(Kk, np.int64)
    theta = np.empty((Kk, n, d))
    theta_pop = np.empty((Kk, n, d)) if state.ln else None
    zeta = np.empty((Kk, n, d))
    z = np.empty((Kk, n, d), np.int8)
    u = np.empty((Kk, n, d)) if state.ln else None
    alam = np.empty(Kk)
    usage = np.zeros((Kk, d, 2, p), bool)
    snaps = [] if c.snapshot_trees else None
    pool = ThreadPoolExecutor(c.n_jobs) if c.n_jobs > 1 else None
    k = 0
    try:
        for it in range(c.iterations):
            try:
                state.step(pool)
            except (FloatingPointError, ArithmeticError, RuntimeError) as e:
                raise NumericFailure(f"iteration {it}: {e}") from e
            if callback is not None:
                callback(it, state)
            if it >= c.burn_in and (it - c.burn_in) % c.thin == 0:
                lf = state.log_fit().T
                it_idx[k] = it
                if state.ln:
                    theta[k] = _softmax_rows(lf + state.Ut.T)
                    theta_pop[k] = _softmax_rows(lf)
                    u[k] = state.Ut.T
                else:
                    theta[k] = _softmax_rows(lf)
                zeta[k] = state.zeta().T
                z[k] = state.Zt.T
                alam[k] = state.gamma_prior.a_lambda
                usage[k] = state.split_counts > 0
                if snaps is not None:
                    snaps.append(state.snapshot())
                k += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return PosteriorDraws(
        variant=c.variant, iteration=it_idx, theta=theta,
        theta_population=theta if theta_pop is None else theta_pop, zeta=zeta, z=z, u=u,
        a_lambda=alam, usage=usage, snapshots=snaps, counters=state.counters.copy(),
        events=dict(state.events, leaf_clamped=int(state.counters[:, :, K.C_CLAMPED].sum()),
                    capacity_rejections=int(state.counters[:, :, K.C_CAPACITY].sum())),
        zeta_fit_override=c.zeta_fit_override)


def predict(draws, X_new):
    """Population-level theta and zeta at new covariate rows for every draw.

    Random effects are excluded (new rows have none).

    Returns
    -------
    theta, zeta : ndarray of shape (K, n_new, d)
    """
    if draws.snapshots is None:
        raise ValueError("draws carry no tree snapshots; refit with snapshot_trees=True")
    X_new = np.ascontiguousarray(np.atleast_2d(X_new), dtype=float)
    Kk = len(draws.snapshots)
    d = len(draws.snapshots[0])
    n = X_new.shape[0]
    lf = np.empty((Kk, n, d))
    f0 = np.empty((Kk, n, d))
    buf = np.empty(n)
    for k, snap in enumerate(draws.snapshots):
        for j in range(d):
            ptr, cvar, cval, cright, _ = snap[j][0]
            K.predict_compact(ptr, cvar, cval, cright, X_new, True, buf)
            lf[k, :, j] = buf
            ptr, cvar, cval, cright, _ = snap[j][1]
            K.predict_compact(ptr, cvar, cval, cright, X_new, False, buf)
            f0[k, :, j] = buf
    theta = _softmax_rows(lf)
    if draws.variant == "multinomial-bart":
        zeta = np.zeros_like(f0)
    elif draws.zeta_fit_override is not None:
        zeta = np.full_like(f0, ndtr(draws.zeta_fit_override))
    else:
        zeta = ndtr(f0)
    return theta, zeta
