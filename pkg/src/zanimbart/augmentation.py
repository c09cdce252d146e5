"""Latent-variable updates linking the forests to the counts.

``phi`` makes the multinomial a product of Poissons, ``z`` marks the
categories at risk and ``w`` is the probit latent behind ``z``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

RATE_FLOOR = 1e-300


@dataclass
class LatentState:
    """Latent variables of the augmented model (row-major, shape (n, d))."""

    phi: np.ndarray
    z: np.ndarray
    w: np.ndarray
    u: np.ndarray

    def check(self, Y, tol=1e-10):
        """Raise ``AssertionError`` if an invariant is violated."""
        assert np.all(self.z[Y > 0] == 1), "z must be 1 where y > 0"
        assert np.all(self.w[self.z == 1] <= 0), "w must be <= 0 where z = 1"
        assert np.all(self.w[self.z == 0] >= 0), "w must be >= 0 where z = 0"
        assert np.all(np.abs(self.u.sum(axis=1)) < tol)
        assert np.all(np.isfinite(self.phi)) and np.all(self.phi >= 0)


def phi_rate(z, fit, u):
    """Gamma rate sum_j z_ij f_j(x_i) e^{u_ij} per row."""
    return np.sum(z * fit * np.exp(u), axis=1)


def update_phi(N, z, fit, u, rng, events=None):
    """Draw phi_i ~ Gamma(N_i, rate sum_j z_ij f_ij e^{u_ij}).

    Rows with ``N_i = 0`` get ``phi_i = 0``. Underflowing rates are clamped at
    1e-300; the number of clamps is added to ``events['phi_rate_clamped']``.
    """
    N = np.asarray(N, float)
    rate = phi_rate(z, fit, u)
    if np.any((N > 0) & ~np.any(z > 0, axis=1)):
        raise RuntimeError("row with positive total has no category at risk")
    low = rate < RATE_FLOOR
    if events is not None:
        events["phi_rate_clamped"] = events.get("phi_rate_clamped", 0) + int(np.sum(low & (N > 0)))
    rate = np.where(low, RATE_FLOOR, rate)
    phi = np.zeros_like(N)
    pos = N > 0
    phi[pos] = rng.gamma(N[pos]) / rate[pos]
    return phi


def update_z(y, log_fit, probit_fit, phi, u, rng, out=None):
    """Draw the at-risk indicators of one category.

    ``z = 1`` where ``y > 0``; otherwise Bernoulli with log-odds
    log[1 - Phi(f0)] - phi e^u f - log Phi(f0).
    """
    out = np.empty(len(y), np.int64) if out is None else out
    K.draw_z(np.asarray(y, np.int64), np.asarray(log_fit, float), np.asarray(probit_fit, float),
             np.asarray(phi, float), np.asarray(u, float), rng, out)
    return out


def update_w(z, probit_fit, rng, out=None):
    """Truncated-normal probit latents: w <= 0 where z = 1, w >= 0 where z = 0."""
    out = np.empty(len(z)) if out is None else out
    K.draw_w(np.asarray(z, np.int64), np.asarray(probit_fit, float), rng, out)
    return out
