"""Sum-to-zero Gaussian random effects with a factor-analytic covariance.

Each row carries ``v_i ~ Normal(0, Gamma Gamma^T + Psi)`` in d-1 dimensions
and ``u_i = B v_i`` with ``B`` an orthonormal basis of the sum-to-zero
subspace. Loadings get a multiplicative gamma process shrinkage prior.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular


def build_basis(d):
    """Normalized Helmert basis of the sum-to-zero subspace of R^d.

    Returns
    -------
    ndarray of shape (d, d - 1)
        Orthonormal columns, each summing to zero.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    B = np.zeros((d, d - 1))
    for k in range(1, d):
        c = 1.0 / math.sqrt(k * (k + 1))
        B[:k, k - 1] = c
        B[k, k - 1] = -k * c
    return B


def ledermann_bound(D):
    """Largest q with (D - q)^2 >= D + q (0 when none)."""
    q = 0
    while q + 1 <= D and (D - q - 1) ** 2 >= D + q + 1:
        q += 1
    return q


@dataclass
class FactorHyper:
    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    a_psi: float = 1.0
    b_psi: float = 1.0


@dataclass
class FactorState:
    """Loadings, scores, idiosyncratic variances and MGP shrinkage."""

    Gamma: np.ndarray
    eta: np.ndarray
    psi: np.ndarray
    rho: np.ndarray
    varrho: np.ndarray
    hyper: FactorHyper = field(default_factory=FactorHyper)

    @property
    def tau(self):
        return np.cumprod(self.varrho)

    @property
    def q(self):
        return self.Gamma.shape[1]

    def sigma_v(self):
        """Dense Sigma_V = Gamma Gamma^T + diag(psi)."""
        return self.Gamma @ self.Gamma.T + np.diag(self.psi)

    @classmethod
    def from_prior(cls, D, n, rng, hyper=None, q=None):
        h = hyper or FactorHyper()
        q = ledermann_bound(D) if q is None else q
        varrho = np.empty(q)
        if q:
            varrho[0] = rng.gamma(h.a1)
            varrho[1:] = rng.gamma(h.a2, size=q - 1)
        rho = rng.gamma(h.nu / 2.0, 2.0 / h.nu, size=(D, q))
        tau = np.cumprod(varrho)
        Gamma = rng.standard_normal((D, q)) / np.sqrt(rho * tau)
        psi = 1.0 / rng.gamma(h.a_psi, 1.0 / h.b_psi, size=D)
        eta = rng.standard_normal((n, q))
        return cls(Gamma, eta, psi, rho, varrho, h)

    def draw_v(self, n, rng):
        """Draws from Normal(0, Sigma_V) as Gamma eta* + eps*."""
        e = rng.standard_normal((n, self.q)) @ self.Gamma.T
        return e + rng.standard_normal((n, self.psi.size)) * np.sqrt(self.psi)


def ess_loglik(V, B, Y, N, zf):
    """Row log-likelihoods of the random effects.

    sum_j y_ij (B v_i)_j - N_i log sum_k z_ik f_ik e^{(B v_i)_k}, where
    ``zf = z * f`` (rows with no category at risk contribute 0).
    """
    U = V @ B.T
    m = U.max(axis=1, keepdims=True)
    s = np.sum(zf * np.exp(U - m), axis=1)
    with np.errstate(divide="ignore"):
        lse = np.where(s > 0, np.log(s) + m[:, 0], 0.0)
    return np.sum(Y * U, axis=1) - N * lse


def update_v_ess(V, B, Y, z, fit, state, rng, loglik=None):
    """One elliptical slice transition per row.

    Parameters
    ----------
    V : ndarray of shape (n, d - 1)
        Current random effects.
    B : ndarray of shape (d, d - 1)
    Y, z, fit : ndarray of shape (n, d)
        Counts, at-risk indicators and log-linear fits.
    state : FactorState
    rng : numpy.random.Generator
    loglik : callable, optional
        Replaces :func:`ess_loglik` (called as ``loglik(V, rows)``).

    Returns
    -------
    ndarray of shape (n, d - 1)
    """
    n = V.shape[0]
    if loglik is None:
        N = Y.sum(axis=1)
        zf = z * fit

        def loglik(Vs, rows):
            return ess_loglik(Vs, B, Y[rows], N[rows], zf[rows])
    nu = state.draw_v(n, rng)
    rows = np.arange(n)
    level = loglik(V, rows) + np.log(rng.random(n))
    theta = rng.random(n) * 2 * math.pi
    lo = theta - 2 * math.pi
    hi = theta.copy()
    out = V.copy()
    active = rows
    while active.size:
        th = theta[active][:, None]
        prop = V[active] * np.cos(th) + nu[active] * np.sin(th)
        ok = loglik(prop, active) > level[active]
        out[active[ok]] = prop[ok]
        rej = active[~ok]
        t = theta[rej]
        neg = t < 0
        lo[rej] = np.where(neg, t, lo[rej])
        hi[rej] = np.where(neg, hi[rej], t)
        theta[rej] = lo[rej] + rng.random(rej.size) * (hi[rej] - lo[rej])
        active = rej
    return out


def _mvn_from_precision(P, b, rng, size=None):
    """Draw from Normal(P^{-1} b, P^{-1}); ``b`` may have shape (k,) or (n, k)."""
    L = np.linalg.cholesky(P)
    mean = cho_solve((L, True), b.T).T
    zshape = mean.shape
    eps = solve_triangular(L.T, rng.standard_normal(zshape).T, lower=False).T
    return mean + eps


def update_loadings(state, V, rng):
    """Row-wise Gaussian draw of the loadings given scores and v."""
    D, q = state.Gamma.shape
    if q == 0:
        return state.Gamma
    H = state.eta
    HtH = H.T @ H
    tau = state.tau
    G = np.empty((D, q))
    for j in range(D):
        P = np.diag(state.rho[j] * tau) + HtH / state.psi[j]
        G[j] = _mvn_from_precision(P, H.T @ V[:, j] / state.psi[j], rng)
    state.Gamma = G
    return G


def update_scores(state, V, rng):
    """Block Gaussian draw of the scores with one shared factorization."""
    q = state.q
    n = V.shape[0]
    if q == 0:
        state.eta = np.zeros((n, 0))
        return state.eta
    Gp = state.Gamma.T / state.psi
    P = np.eye(q) + Gp @ state.Gamma
    state.eta = _mvn_from_precision(P, V @ Gp.T, rng)
    return state.eta


def update_idiosyncratic_and_mgp(state, V, rng):
    """Gibbs updates of psi, the local shrinkage rho and the global varrho."""
    h = state.hyper
    n, D = V.shape
    q = state.q
    R = V - state.eta @ state.Gamma.T
    ss = np.sum(R * R, axis=0)
    state.psi = 1.0 / rng.gamma(n / 2.0 + h.a_psi, 1.0 / (ss / 2.0 + h.b_psi))
    if q == 0:
        return state
    G2 = state.Gamma ** 2
    tau = state.tau
    state.rho = rng.gamma((h.nu + 1) / 2.0, 2.0 / (h.nu + tau * G2))
    colsum = np.sum(state.rho * G2, axis=0)
    for k in range(q):
        tau_k = np.cumprod(state.varrho) / state.varrho[k]
        rate = 1.0 + 0.5 * np.sum(tau_k[k:] * colsum[k:])
        shape = (h.a1 if k == 0 else h.a2) + D * (q - k) / 2.0
        state.varrho[k] = rng.gamma(shape, 1.0 / rate)
    return state


def update_factors(state, V, rng):
    """Loadings, scores, then variances and shrinkage."""
    update_loadings(state, V, rng)
    update_scores(state, V, rng)
    update_idiosyncratic_and_mgp(state, V, rng)
    return state
