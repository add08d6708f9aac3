"""
Gaussian-process interpolation of core intensities onto the pixel grid.

The GP is zero-mean with covariance ``Delta' = Delta / gamma2`` and the
predictive variance at a target is ``1/gamma2`` minus the explained part.
The training values are treated as noise-free, so jitter is only a
numerical device.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .model import (
    CoreMap,
    CovarianceParams,
    NumericalError,
    ParameterError,
    cross_covariance,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterpolatedImage:
    mean: np.ndarray
    variance: np.ndarray
    params: CovarianceParams
    gamma2: float


def _targets_from_grid(grid):
    width, height = (int(v) for v in grid)
    if width < 1 or height < 1:
        raise ParameterError("grid must be (width, height) with positive entries")
    rows, cols = np.mgrid[0:height, 0:width]
    pts = np.column_stack([cols.ravel(), rows.ravel()]).astype(float)
    return pts, (height, width)


def gp_interpolate(cores: CoreMap, x_hat, gamma2: float, params: CovarianceParams,
                   grid=None, points=None, jitter: float = 1e-8,
                   tile: int = 4096) -> InterpolatedImage:
    """Posterior mean and variance of the zero-mean GP at every target.

    Targets are the full ``(width, height)`` pixel grid (default: the
    CoreMap's image size), or an explicit ``(M, 2)`` array of ``(x, y)``
    ``points``; in the latter case ``mean`` and ``variance`` are length-M
    vectors.  ``jitter`` is added to the diagonal of the core covariance.
    """
    if not gamma2 > 0:
        raise ParameterError("gamma2 must be > 0")
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != (cores.n_cores,):
        raise ParameterError("x_hat must have one value per core")
    if points is not None:
        targets = np.asarray(points, dtype=float).reshape(-1, 2)
        out_shape = (len(targets),)
    else:
        targets, out_shape = _targets_from_grid(grid or (cores.width, cores.height))
    z = np.asarray(cores.positions, dtype=float)

    K = cross_covariance(z, z, params) / gamma2
    K[np.diag_indices_from(K)] += jitter
    try:
        cf = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("core covariance not PD; increase jitter or reduce l") from exc
    weights = scipy.linalg.cho_solve(cf, x_hat, check_finite=False)
    L = np.tril(cf[0])

    prior_var = 1.0 / gamma2
    mean = np.empty(len(targets))
    var = np.empty(len(targets))
    for start in range(0, len(targets), tile):
        t = targets[start:start + tile]
        Ks = cross_covariance(t, z, params) / gamma2
        mean[start:start + tile] = Ks @ weights
        v = scipy.linalg.solve_triangular(L, Ks.T, lower=True, check_finite=False)
        var[start:start + tile] = prior_var - np.einsum("ij,ij->j", v, v)

    worst = float(var.min()) if var.size else 0.0
    if worst < -1e-8 * prior_var:
        log.warning("clamped negative GP variance %.3g", worst)
    np.maximum(var, 0.0, out=var)
    return InterpolatedImage(mean.reshape(out_shape), var.reshape(out_shape), params, float(gamma2))


def uncertainty_to_confidence(variance, level: float = 0.95) -> np.ndarray:
    """Half-width of the central ``level`` normal interval for each variance."""
    if not 0 < level < 1:
        raise ParameterError("level must lie in (0, 1)")
    v = np.asarray(variance, dtype=float)
    return norm.ppf(0.5 * (1.0 + level)) * np.sqrt(np.maximum(v, 0.0))
