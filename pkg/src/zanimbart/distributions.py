"""Zero-and-N-inflated multinomial (ZANIM) family and its logistic-normal
extension (ZANIM-LN).

A ZANIM vector is generated by switching each category on with probability
``1 - zeta_j`` and drawing ``N`` multinomial trials over the categories that
are on, with their ``theta`` renormalized. If every category is off the
result is the zero vector. ZANIM-LN first perturbs ``log theta`` with a
Gaussian random effect.
"""

from dataclasses import dataclass
import math

import numpy as np
from numba import njit
from scipy.special import gammaln

MAX_EXACT_BITS = 20


class EnumerationBudgetExceeded(ValueError):
    """Raised when an exact PMF would need more than 2**MAX_EXACT_BITS terms."""


@dataclass
class ZanimParams:
    """Parameters of a ZANIM distribution.

    Attributes
    ----------
    theta : ndarray of shape (d,)
        Compositional probabilities, strictly positive and summing to one.
    zeta : ndarray of shape (d,)
        Structural-zero probabilities in [0, 1].
    N : int
        Number of trials.
    """

    theta: np.ndarray
    zeta: np.ndarray
    N: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.N = int(self.N)
        if self.theta.ndim != 1 or self.theta.shape != self.zeta.shape:
            raise ValueError("theta and zeta must be vectors of equal length")
        if np.any(self.theta <= 0):
            raise ValueError("theta must be strictly positive")
        if abs(self.theta.sum() - 1.0) > 1e-12:
            raise ValueError("theta must sum to one")
        if np.any(self.zeta < 0) or np.any(self.zeta > 1):
            raise ValueError("zeta must lie in [0, 1]")
        if self.N < 1:
            raise ValueError("N must be a positive integer")

    @property
    def d(self):
        return self.theta.shape[0]


@dataclass
class ZanimLnParams:
    """Parameters of a ZANIM-LN distribution.

    Attributes
    ----------
    alpha : ndarray of shape (d,)
        Positive concentrations; ``theta = alpha * exp(u) / sum(alpha * exp(u))``.
    zeta : ndarray of shape (d,)
        Structural-zero probabilities in [0, 1].
    sigma_u : ndarray of shape (d, d)
        Covariance of the random effect ``u``.
    N : int
        Number of trials.
    """

    alpha: np.ndarray
    zeta: np.ndarray
    sigma_u: np.ndarray
    N: int

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.sigma_u = np.asarray(self.sigma_u, dtype=float)
        self.N = int(self.N)
        d = self.alpha.shape[0]
        if self.alpha.ndim != 1 or self.zeta.shape != (d,):
            raise ValueError("alpha and zeta must be vectors of equal length")
        if self.sigma_u.shape != (d, d):
            raise ValueError("sigma_u must be d x d")
        if np.any(self.alpha <= 0):
            raise ValueError("alpha must be strictly positive")
        if np.any(self.zeta < 0) or np.any(self.zeta > 1):
            raise ValueError("zeta must lie in [0, 1]")
        if not np.allclose(self.sigma_u, self.sigma_u.T, atol=1e-8):
            raise ValueError("sigma_u must be symmetric")
        if np.linalg.eigvalsh(self.sigma_u).min() < -1e-8:
            raise ValueError("sigma_u must be positive semidefinite")
        if self.N < 1:
            raise ValueError("N must be a positive integer")

    @property
    def d(self):
        return self.alpha.shape[0]

    def factor(self):
        """Matrix ``L`` with ``L @ L.T == sigma_u`` (PSD-safe)."""
        try:
            return np.linalg.cholesky(self.sigma_u)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(self.sigma_u)
            return V * np.sqrt(np.clip(w, 0.0, None))

    def theta_given(self, u):
        """Compositional probabilities for random effects ``u`` (rows)."""
        eta = np.log(self.alpha) + np.asarray(u, dtype=float)
        eta = eta - eta.max(axis=-1, keepdims=True)
        e = np.exp(eta)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MarginalMoments:
    """Per-category marginal summaries.

    ``zi_index`` is NaN where it is undefined (DI equal to one or zero mean).
    """

    mean: np.ndarray
    variance: np.ndarray
    dispersion_index: np.ndarray
    zi_index: np.ndarray
    prob_zero: np.ndarray


def _draw_zanim(theta, zeta, N, rng, size):
    d = theta.shape[-1]
    z = rng.random((size, d)) >= zeta
    w = np.where(z, theta, 0.0)
    tot = w.sum(axis=1, keepdims=True)
    empty = tot[:, 0] <= 0
    pv = np.where(empty[:, None], 1.0 / d, w / np.where(empty[:, None], 1.0, tot))
    y = rng.multinomial(N, pv)
    y[empty] = 0
    return y


def sample_zanim(params, rng, size=None):
    """Draw ZANIM count vectors.

    Parameters
    ----------
    params : ZanimParams
    rng : numpy.random.Generator
    size : int, optional
        Number of draws. When omitted a single vector is returned.

    Returns
    -------
    ndarray of int64, shape (d,) or (size, d)
    """
    n = 1 if size is None else int(size)
    y = _draw_zanim(params.theta, params.zeta, params.N, rng, n)
    return y[0] if size is None else y


def sample_zanim_ln(params, rng, size=None):
    """Draw ZANIM-LN count vectors (random effect drawn per vector)."""
    n = 1 if size is None else int(size)
    L = params.factor()
    u = rng.standard_normal((n, params.d)) @ L.T
    theta = params.theta_given(u)
    y = _draw_zanim(theta, params.zeta, params.N, rng, n)
    return y[0] if size is None else y


@njit(cache=True)
def _log_subset_sum(log_theta, log_zeta, log_1mzeta, y, N):
    """log sum_{T subset of zeros(y)} P(T on, rest off) * theta(supp(y) u T)^{-N}.

    The multinomial constant and the theta^y factor are added by the caller.
    """
    d = y.shape[0]
    zeros = np.empty(d, np.int64)
    nz = 0
    base_on = 0.0
    tsupp = -np.inf
    for j in range(d):
        if y[j] > 0:
            base_on += log_1mzeta[j]
            a = tsupp if tsupp > log_theta[j] else log_theta[j]
            tsupp = a + math.log(math.exp(tsupp - a) + math.exp(log_theta[j] - a))
        else:
            zeros[nz] = j
            nz += 1
    best = -np.inf
    acc = 0.0
    for mask in range(1 << nz):
        lw = base_on
        lt = tsupp
        for b in range(nz):
            j = zeros[b]
            if (mask >> b) & 1:
                lw += log_1mzeta[j]
                a = lt if lt > log_theta[j] else log_theta[j]
                lt = a + math.log(math.exp(lt - a) + math.exp(log_theta[j] - a))
            else:
                lw += log_zeta[j]
        term = lw - N * lt
        if term == -np.inf:
            continue
        if term > best:
            acc = acc * math.exp(best - term) + 1.0
            best = term
        else:
            acc += math.exp(term - best)
    if best == -np.inf:
        return -np.inf
    return best + math.log(acc)


@njit(cache=True)
def zanim_logpmf_rows(Y, log_theta, log_zeta, log_1mzeta, lfact):
    """Exact log PMF for each row of ``Y`` with row-specific parameters.

    ``lfact[k]`` must hold log(k!) for k up to the largest row total.
    """
    n, d = Y.shape
    out = np.empty(n)
    for i in range(n):
        N = 0
        for j in range(d):
            N += Y[i, j]
        if N == 0:
            s = 0.0
            for j in range(d):
                s += log_zeta[i, j]
            out[i] = s
            continue
        c = lfact[N]
        for j in range(d):
            if Y[i, j] > 0:
                c += Y[i, j] * log_theta[i, j] - lfact[Y[i, j]]
        out[i] = c + _log_subset_sum(log_theta[i], log_zeta[i], log_1mzeta[i], Y[i], N)
    return out


def _safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def log_factorials(nmax):
    return gammaln(np.arange(nmax + 1) + 1.0)


def _check_support(y, N):
    y = np.asarray(y)
    if y.ndim != 1 or np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be a vector of nonnegative integers")
    y = y.astype(np.int64)
    if y.sum() not in (0, N):
        raise ValueError(f"y must be all-zero or sum to N={N}, got total {y.sum()}")
    return y


def zanim_logpmf(y, params, max_exact_bits=MAX_EXACT_BITS):
    """Exact log PMF of a ZANIM vector.

    Raises
    ------
    EnumerationBudgetExceeded
        If the number of zero categories exceeds ``max_exact_bits``; use
        :func:`zanim_pmf_mc` instead.
    """
    y = _check_support(y, params.N)
    nzero = int(np.sum(y == 0))
    if y.sum() > 0 and nzero > max_exact_bits:
        raise EnumerationBudgetExceeded(
            f"{nzero} zero categories exceed the exact budget of 2**{max_exact_bits} terms")
    lz = _safe_log(params.zeta)[None]
    l1 = _safe_log(1.0 - params.zeta)[None]
    return float(zanim_logpmf_rows(y[None], np.log(params.theta)[None], lz, l1,
                                   log_factorials(params.N))[0])


def zanim_pmf(y, params, max_exact_bits=MAX_EXACT_BITS):
    """Exact PMF of a ZANIM vector (see :func:`zanim_logpmf`)."""
    return math.exp(zanim_logpmf(y, params, max_exact_bits))


def zanim_pmf_mc(y, params, mc_draws, rng):
    """Monte Carlo PMF over the on/off configuration of the zero categories.

    Returns
    -------
    estimate, standard_error : float
    """
    y = _check_support(y, params.N)
    if y.sum() == 0:
        return float(np.prod(params.zeta)), 0.0
    on = y > 0
    theta, zeta, N = params.theta, params.zeta, params.N
    logc = (gammaln(N + 1.0) - gammaln(y + 1.0).sum()
            + np.sum(y[on] * np.log(theta[on])) + np.sum(_safe_log(1.0 - zeta[on])))
    zi = np.flatnonzero(~on)
    z = rng.random((int(mc_draws), zi.size)) >= zeta[zi]
    tot = theta[on].sum() + z @ theta[zi]
    vals = np.exp(logc - N * np.log(tot))
    se = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0
    return float(vals.mean()), float(se)


def zanim_ln_pmf_mc(y, params, mc_draws, rng, max_exact_bits=MAX_EXACT_BITS):
    """Monte Carlo PMF of a ZANIM-LN vector averaged over the random effect.

    Returns
    -------
    estimate, standard_error : float
    """
    y = _check_support(y, params.N)
    mc_draws = int(mc_draws)
    if mc_draws < 1:
        raise ValueError("mc_draws must be >= 1")
    L = params.factor()
    u = rng.standard_normal((mc_draws, params.d)) @ L.T
    theta = params.theta_given(u)
    if y.sum() > 0 and np.sum(y == 0) > max_exact_bits:
        raise EnumerationBudgetExceeded("too many zero categories for exact evaluation")
    Y = np.broadcast_to(y, theta.shape).copy()
    lz = np.broadcast_to(_safe_log(params.zeta), theta.shape).copy()
    l1 = np.broadcast_to(_safe_log(1.0 - params.zeta), theta.shape).copy()
    vals = np.exp(zanim_logpmf_rows(Y, np.log(theta), lz, l1, log_factorials(params.N)))
    se = vals.std(ddof=1) / math.sqrt(mc_draws) if mc_draws > 1 else 0.0
    return float(vals.mean()), float(se)


@njit(cache=True)
def _conditional_moments(theta, zeta, N, mean, second, p0):
    """Accumulate E[Y], E[Y^2] and P(Y=0) by enumerating all 2^d on/off sets."""
    d = theta.shape[0]
    for j in range(d):
        mean[j] = 0.0
        second[j] = 0.0
        p0[j] = 0.0
    for mask in range(1 << d):
        w = 1.0
        tot = 0.0
        for j in range(d):
            if (mask >> j) & 1:
                w *= 1.0 - zeta[j]
                tot += theta[j]
            else:
                w *= zeta[j]
        if w == 0.0:
            continue
        for j in range(d):
            if (mask >> j) & 1:
                p = theta[j] / tot
                m = N * p
                mean[j] += w * m
                second[j] += w * (m * (1.0 - p) + m * m)
                p0[j] += w * (1.0 - p) ** N
            else:
                p0[j] += w


@njit(cache=True)
def _ln_moment_sums(thetas, zeta, N, E, E2, P0, M2):
    """Mixture sums over random-effect draws for the ZANIM-LN moments.

    Returns accumulated sums of E[Y|u], E[Y^2|u], P(Y=0|u) and E[Y|u]^2.
    """
    d = zeta.shape[0]
    m = np.empty(d)
    s = np.empty(d)
    p = np.empty(d)
    for r in range(thetas.shape[0]):
        _conditional_moments(thetas[r], zeta, N, m, s, p)
        for j in range(d):
            E[j] += m[j]
            E2[j] += s[j]
            P0[j] += p[j]
            M2[j] += m[j] * m[j]


def _summaries(mean, var, p0):
    with np.errstate(divide="ignore", invalid="ignore"):
        di = np.where(mean > 0, var / np.where(mean > 0, mean, 1.0), np.nan)
        logdi = np.log(di)
        ok = (mean > 0) & np.isfinite(logdi) & (logdi != 0)
        zi = np.where(ok, 1.0 + (var - mean) * np.log(p0) / (mean ** 2 * np.where(ok, logdi, 1.0)),
                      np.nan)
    return MarginalMoments(mean, var, di, zi, p0)


def marginal_moments(params, mc_draws=5000, rng=None, batch=100_000):
    """Marginal moments, dispersion and zero-inflation indices.

    Exact (enumeration over the 2^d on/off configurations) for
    :class:`ZanimParams`; Monte Carlo over the random effect for
    :class:`ZanimLnParams` using the laws of total expectation and variance.

    Parameters
    ----------
    params : ZanimParams or ZanimLnParams
    mc_draws : int
        Random-effect draws for ZANIM-LN.
    rng : numpy.random.Generator, optional
        Required for ZANIM-LN.
    batch : int
        Random-effect draws processed per block.
    """
    if isinstance(params, ZanimParams):
        if params.d > MAX_EXACT_BITS:
            raise EnumerationBudgetExceeded("moment enumeration limited to d <= 20")
        d = params.d
        mean, second, p0 = np.empty(d), np.empty(d), np.empty(d)
        _conditional_moments(params.theta, params.zeta, params.N, mean, second, p0)
        return _summaries(mean, second - mean ** 2, p0)
    if rng is None:
        raise ValueError("rng is required for ZANIM-LN moments")
    d = params.d
    L = params.factor()
    E, E2, P0, M2 = (np.zeros(d) for _ in range(4))
    left = int(mc_draws)
    while left > 0:
        k = min(left, batch)
        u = rng.standard_normal((k, d)) @ L.T
        _ln_moment_sums(params.theta_given(u), params.zeta, params.N, E, E2, P0, M2)
        left -= k
    M = float(mc_draws)
    mean = E / M
    var = E2 / M - mean ** 2
    return _summaries(mean, var, P0 / M)
