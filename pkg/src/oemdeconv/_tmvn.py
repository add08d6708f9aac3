"""Samplers for Gaussians truncated to the nonnegative orthant."""

from __future__ import annotations

from math import exp, pi, sqrt

import numpy as np
import scipy.linalg
from numba import njit

# below this standardized bound, plain normal rejection beats the exponential proposal
_EXP_SWITCH = 0.257


@njit(cache=True)
def _std_truncnorm_lower(a, rng):
    """Draw z ~ N(0, 1) conditioned on z >= a."""
    if a < _EXP_SWITCH:
        while True:
            z = rng.standard_normal()
            if z >= a:
                return z
    lam = 0.5 * (a + sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential() / lam
        if rng.random() <= exp(-0.5 * (z - lam) ** 2):
            return z


@njit(cache=True)
def truncnorm_positive(mean, sd, rng):
    """One draw from N(mean, sd^2) restricted to [0, inf)."""
    return mean + sd * _std_truncnorm_lower(-mean / sd, rng)


@njit(cache=True)
def gibbs_sweep_split(A, a, B, c, b, x, rng):
    """One in-place systematic-scan sweep for ``exp(-x'Qx/2 + b'x)`` on x >= 0
    with ``Q = a A + c B`` (A, B symmetric).

    Q is never formed.  The residual ``r = b - Q x`` is kept up to date so
    each coordinate update costs O(N).
    """
    n = x.shape[0]
    r = b.copy()
    for i in range(n):
        xi = x[i]
        if xi != 0.0:
            for j in range(n):
                r[j] -= (a * A[i, j] + c * B[i, j]) * xi
    for i in range(n):
        qii = a * A[i, i] + c * B[i, i]
        m = x[i] + r[i] / qii
        new = truncnorm_positive(m, 1.0 / sqrt(qii), rng)
        delta = new - x[i]
        if delta != 0.0:
            for j in range(n):
                r[j] -= (a * A[i, j] + c * B[i, j]) * delta
        x[i] = new
    return x


def gibbs_sweep(Q, b, x, rng):
    """Same as :func:`gibbs_sweep_split` for an explicit symmetric precision ``Q``."""
    Q = np.ascontiguousarray(Q, dtype=float)
    return gibbs_sweep_split(Q, 1.0, Q, 0.0, np.asarray(b, dtype=float), x, rng)


def exact_hmc_step(Q, b, x_current, rng, travel_time=pi / 2, max_bounces=100_000):
    """One exact HMC transition for ``N(Q^{-1} b, Q^{-1})`` truncated to x >= 0.

    Works in whitened coordinates ``x = mu + F z`` with ``F F' = Q^{-1}``;
    the Hamiltonian flow is harmonic, so wall hits are found in closed form
    and the velocity is reflected on the hit constraint.
    """
    n = len(b)
    U = scipy.linalg.cholesky(Q, lower=True)
    mu = scipy.linalg.cho_solve((U, True), b)
    # F = U^{-T}, so z = U^T (x - mu)
    F = scipy.linalg.solve_triangular(U.T, np.eye(n), lower=False)
    x0 = np.maximum(np.asarray(x_current, dtype=float), 1e-12)
    pos = U.T @ (x0 - mu)
    vel = rng.standard_normal(n)
    fnorm2 = np.einsum("ij,ij->i", F, F)
    remaining = travel_time
    last = -1
    for _ in range(max_bounces):
        fa = F @ vel
        fb = F @ pos
        u = np.sqrt(fa**2 + fb**2)
        phi = np.arctan2(-fa, fb)
        t_hit = np.full(n, np.inf)
        can = u > np.abs(mu)
        if can.any():
            t = np.mod(np.arccos(-mu[can] / u[can]) - phi[can], 2 * pi)
            t_hit[can] = t
        if last >= 0 and t_hit[last] < 1e-10:
            t_hit[last] = np.inf
        j = int(np.argmin(t_hit))
        t = t_hit[j]
        if t >= remaining:
            pos = vel * np.sin(remaining) + pos * np.cos(remaining)
            break
        new_pos = vel * np.sin(t) + pos * np.cos(t)
        new_vel = vel * np.cos(t) - pos * np.sin(t)
        f = F[j]
        new_vel = new_vel - 2.0 * (f @ new_vel) / fnorm2[j] * f
        pos, vel = new_pos, new_vel
        remaining -= t
        last = j
    else:
        raise RuntimeError("exact HMC exceeded the bounce budget")
    return np.maximum(mu + F @ pos, 0.0)
