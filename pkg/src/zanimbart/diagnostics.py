"""Posterior and posterior-predictive diagnostics."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import logsumexp, ndtr

from . import _kernels as K
from .distributions import (MAX_EXACT_BITS, ZanimParams, _draw_zanim, log_factorials,
                            zanim_logpmf_rows, zanim_pmf_mc)
from .sampler import _softmax_rows

KL_FLOOR = 1e-12


@dataclass
class WaicResult:
    """WAIC with its parts; ``waic = -2 * (lppd.sum() - p_waic)``."""

    waic: float
    p_waic: float
    lppd: np.ndarray
    var_log_lik: np.ndarray
    mc_rows: np.ndarray


def pointwise_log_lik(theta, zeta, Y, rng=None, mc_draws=20000):
    """log Pr[Y_i = y_i | theta_t, zeta_t] for every draw t and row i.

    Rows whose exact evaluation would need more than 2**20 terms are
    estimated by Monte Carlo over the on/off configuration.

    Returns
    -------
    ll : ndarray of shape (T, n)
    mc_rows : ndarray of bool, shape (n,)
    """
    Y = np.ascontiguousarray(Y, dtype=np.int64)
    T = theta.shape[0]
    n, d = Y.shape
    nzero = np.sum(Y == 0, axis=1)
    mc_rows = (nzero > MAX_EXACT_BITS) & (Y.sum(axis=1) > 0)
    lfact = log_factorials(int(Y.sum(axis=1).max()))
    ll = np.empty((T, n))
    with np.errstate(divide="ignore"):
        for t in range(T):
            th = np.clip(theta[t], 1e-300, None)
            ll[t] = zanim_logpmf_rows(Y, np.log(th), np.log(zeta[t]), np.log1p(-zeta[t]), lfact)
    if np.any(mc_rows):
        rng = rng or np.random.default_rng(0)
        for i in np.flatnonzero(mc_rows):
            for t in range(T):
                th = theta[t, i] / theta[t, i].sum()
                est, _ = zanim_pmf_mc(Y[i], ZanimParams(th, zeta[t, i], Y[i].sum()), mc_draws,
                                      rng)
                ll[t, i] = math.log(est) if est > 0 else -math.inf
    return ll, mc_rows


def waic_from_log_lik(ll, mc_rows=None):
    T = ll.shape[0]
    lppd = logsumexp(ll, axis=0) - math.log(T)
    var = ll.var(axis=0, ddof=1) if T > 1 else np.zeros(ll.shape[1])
    p = float(var.sum())
    mc = np.zeros(ll.shape[1], bool) if mc_rows is None else mc_rows
    return WaicResult(-2.0 * (float(lppd.sum()) - p), p, lppd, var, mc)


def waic(draws, Y, rng=None):
    """WAIC using each draw's subject-level theta and zeta.

    For the logistic-normal variant this conditions on the sampled random
    effects.
    """
    ll, mc = pointwise_log_lik(draws.theta, draws.zeta, Y, rng)
    return waic_from_log_lik(ll, mc)


def rps(pred_rel, obs_rel, grid=None):
    """Average ranked probability score of one category.

    Parameters
    ----------
    pred_rel : ndarray of shape (T, n)
        Posterior-predictive relative abundances.
    obs_rel : ndarray of shape (n,)
        Observed relative abundances.
    grid : ndarray, optional
        Evaluation points; defaults to the sorted unique observed values.
    """
    pred_rel = np.asarray(pred_rel, float)
    obs_rel = np.asarray(obs_rel, float)
    g = np.unique(obs_rel) if grid is None else np.sort(np.asarray(grid, float))
    # F_pred(t) per observation via sorted predictive draws
    srt = np.sort(pred_rel, axis=0)
    T = srt.shape[0]
    F = np.empty((obs_rel.size, g.size))
    for i in range(obs_rel.size):
        F[i] = np.searchsorted(srt[:, i], g, side="right") / T
    ind = (obs_rel[:, None] <= g[None, :]).astype(float)
    return float(np.mean(np.sum((F - ind) ** 2, axis=1)))


def relative_abundance(Y):
    Y = np.asarray(Y, float)
    N = Y.sum(axis=-1, keepdims=True)
    return np.divide(Y, N, out=np.zeros_like(Y), where=N > 0)


def rps_table(draws, Y, rng):
    """RPS for every category from in-sample posterior-predictive draws."""
    pred = relative_abundance(posterior_predictive(draws, Y, rng))
    obs = relative_abundance(Y)
    return np.array([rps(pred[:, :, j], obs[:, j]) for j in range(obs.shape[1])])


def kl_traces(draws, theta_true, zeta_true):
    """Per-iteration KL divergences from the truth.

    Returns
    -------
    kl_theta, kl_zeta : ndarray of shape (K,)
    clamped : int
        Number of model probabilities raised to the 1e-12 floor.
    """
    th = draws.theta_population
    ts = np.asarray(theta_true, float)
    clamped = int(np.sum(th < KL_FLOOR))
    thc = np.maximum(th, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ts > 0, ts * (np.log(ts) - np.log(thc)), 0.0)
    kl_theta = terms.sum(axis=2).mean(axis=1)
    zs = np.asarray(zeta_true, float)
    zc = np.clip(draws.zeta, KL_FLOOR, 1 - KL_FLOOR)
    clamped += int(np.sum((draws.zeta < KL_FLOOR) | (draws.zeta > 1 - KL_FLOOR)))
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(zs > 0, zs * (np.log(zs) - np.log(zc)), 0.0)
        b = np.where(zs < 1, (1 - zs) * (np.log1p(-zs) - np.log1p(-zc)), 0.0)
    kl_zeta = (a + b).mean(axis=(1, 2))
    return kl_theta, kl_zeta, clamped


def effective_sample_size(x):
    """ESS from Geyer's initial monotone positive-sequence estimator."""
    x = np.asarray(x, float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    s = 0.0
    prev = math.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        s += pair
        prev = pair
    tau = -1.0 + 2.0 * s
    return float(n / max(tau, 1.0 / n))


def frobenius_trace(draws, Y):
    """Frobenius distance between observed and fitted compositions.

    Returns
    -------
    trace : ndarray of shape (K,)
    ess : float
    """
    obs = relative_abundance(Y)
    fit = draws.fitted_composition()
    tr = np.sqrt(np.sum((obs[None] - fit) ** 2, axis=(1, 2)))
    return tr, effective_sample_size(tr)


def mppi(draws):
    """Posterior inclusion probability per (category, level, covariate)."""
    return draws.usage.mean(axis=0)


@dataclass
class PdpGrid:
    """Partial dependence summaries.

    ``theta`` and ``zeta`` hold per-draw curves of shape (G, K, d); the
    summaries are (G, d) arrays.
    """

    grid: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray

    def summary(self, level):
        a = self.theta if level == "theta" else self.zeta
        q = np.quantile(a, [0.025, 0.5, 0.975], axis=1)
        return q[0], q[1], q[2]


def pdp(draws, X_ref, covariate, grid=None, grid_points=31):
    """Partial dependence of theta and zeta on one covariate.

    For every grid value the covariate is set to that value in every
    reference row and the population-level predictions are averaged over the
    rows, separately for each posterior draw.
    """
    if draws.snapshots is None:
        raise ValueError("draws carry no tree snapshots; refit with snapshot_trees=True")
    X_ref = np.ascontiguousarray(np.atleast_2d(X_ref), dtype=float)
    if grid is None:
        col = X_ref[:, covariate]
        grid = np.linspace(col.min(), col.max(), grid_points)
    grid = np.asarray(grid, float)
    G, n = grid.size, X_ref.shape[0]
    Kk = len(draws.snapshots)
    d = len(draws.snapshots[0])
    th = np.empty((G, Kk, d))
    ze = np.empty((G, Kk, d))
    lf = np.empty((G, n, d))
    f0 = np.empty((G, n))
    for k, snap in enumerate(draws.snapshots):
        for j in range(d):
            ptr, cvar, cval, cright, _ = snap[j][0]
            K.predict_compact_grid(ptr, cvar, cval, cright, X_ref, covariate, grid, True,
                                   f0)
            lf[:, :, j] = f0
            if draws.variant == "multinomial-bart":
                ze[:, k, j] = 0.0
            elif draws.zeta_fit_override is not None:
                ze[:, k, j] = ndtr(draws.zeta_fit_override)
            else:
                ptr, cvar, cval, cright, _ = snap[j][1]
                K.predict_compact_grid(ptr, cvar, cval, cright, X_ref, covariate, grid, False,
                                       f0)
                ze[:, k, j] = ndtr(f0).mean(axis=1)
        th[:, k, :] = _softmax_rows(lf).mean(axis=1)
    return PdpGrid(grid, th, ze)


def posterior_predictive(draws, Y_or_N, rng, in_sample=True, theta=None, zeta=None):
    """Posterior-predictive counts, one replicate per kept draw.

    In-sample replicates condition on each draw's z and random effects
    (multinomial over the fitted composition). Out-of-sample replicates are
    marginal ZANIM draws from ``theta`` and ``zeta`` (arrays (K, n, d)).

    Returns
    -------
    ndarray of int64, shape (K, n, d)
    """
    arr = np.asarray(Y_or_N)
    N = arr.sum(axis=1) if arr.ndim == 2 else arr.astype(np.int64)
    if in_sample:
        vt = draws.fitted_composition()
        Kk, n, d = vt.shape
        out = np.zeros((Kk, n, d), np.int64)
        empty = vt.sum(axis=2) <= 0
        pv = np.where(empty[..., None], 1.0 / d, vt)
        for k in range(Kk):
            out[k] = rng.multinomial(N, pv[k])
        out[empty] = 0
        return out
    theta = draws.theta_population if theta is None else theta
    zeta = draws.zeta if zeta is None else zeta
    Kk, n, d = theta.shape
    out = np.empty((Kk, n, d), np.int64)
    for i in range(n):
        for k in range(Kk):
            out[k, i] = _draw_zanim(theta[k, i], zeta[k, i], int(N[i]), rng, 1)[0]
    return out
