"""
Calibration: fibre-core detection and maximum-likelihood fitting of the
spatial prior parameters ``(length_scale, exponent)``.
"""

from __future__ import annotations

import logging
from math import log, pi

import numpy as np
import scipy.linalg
from scipy import ndimage

from .model import CoreMap, CovarianceParams, ParameterError

log_ = logging.getLogger(__name__)

DEFAULT_LENGTH_GRID = tuple(float(v) for v in range(1, 21))
DEFAULT_EXPONENT_GRID = tuple(0.25 * k for k in range(1, 9))


class NoCoresFound(RuntimeError):
    pass


def _subpixel_offset(left, centre, right):
    # parabola through log intensities: exact peak of an isolated Gaussian spot
    if min(left, centre, right) <= 0:
        denom = left - 2 * centre + right
        return 0.0 if denom >= 0 else 0.5 * (left - right) / denom
    ll, lc, lr = log(left), log(centre), log(right)
    denom = ll - 2 * lc + lr
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (ll - lr) / denom, -0.5, 0.5))


def detect_cores(image, min_separation: float = 2.0, intensity_floor: float = 0.2) -> CoreMap:
    """Locate fibre-core centres in a calibration (background) image.

    Pixels above ``intensity_floor * max`` that are 3x3 local maxima are
    grouped into connected components; each component gives one centroid,
    refined to sub-pixel precision when it is a single-pixel peak.  Centroids
    closer than ``min_separation`` are suppressed greedily, brightest first.
    Cores are returned in raster order (by row, then column).
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ParameterError("image must be 2-D")
    if img.max() == img.min():
        raise ParameterError("image is constant")
    lo = img.min()
    work = img - lo
    thresh = intensity_floor * work.max()
    peaks = (work >= thresh) & (work > 0)
    peaks &= work == ndimage.maximum_filter(work, size=3, mode="constant", cval=0.0)
    labels, n = ndimage.label(peaks, structure=np.ones((3, 3)))
    if n == 0:
        raise NoCoresFound("no cores found; lower intensity_floor")
    idx = np.arange(1, n + 1)
    centres = np.array(ndimage.center_of_mass(peaks, labels, idx), dtype=float)  # (row, col)
    sizes = ndimage.sum(peaks, labels, idx)
    brightness = ndimage.maximum(work, labels, idx)
    h, w = img.shape
    for k in range(n):
        if sizes[k] != 1:
            continue
        r, c = int(centres[k, 0]), int(centres[k, 1])
        if 0 < r < h - 1:
            centres[k, 0] += _subpixel_offset(work[r - 1, c], work[r, c], work[r + 1, c])
        if 0 < c < w - 1:
            centres[k, 1] += _subpixel_offset(work[r, c - 1], work[r, c], work[r, c + 1])
    # brightest first; ties by raster position so the result is deterministic
    order = np.lexsort((centres[:, 1], centres[:, 0], -brightness))
    kept = []
    for k in order:
        if all((centres[k, 0] - centres[j, 0]) ** 2 + (centres[k, 1] - centres[j, 1]) ** 2
               >= min_separation**2 for j in kept):
            kept.append(k)
    pts = centres[kept]
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    return CoreMap(w, h, pts[:, ::-1].copy())


def profiled_log_likelihood(x, distances, params: CovarianceParams, jitter: float = 1e-8):
    """Zero-mean Gaussian log-density of ``x`` under ``gamma2 * Delta(params)``
    with ``gamma2`` replaced by its closed-form maximizer ``x' Delta^{-1} x / N``.

    Returns ``(loglik, gamma2_hat)``; raises ``LinAlgError`` if Delta is not PD.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    delta = np.exp(-((distances / params.length_scale) ** params.exponent))
    delta[np.diag_indices_from(delta)] += jitter
    L = scipy.linalg.cholesky(delta, lower=True)
    z = scipy.linalg.solve_triangular(L, x, lower=True)
    quad = float(z @ z)
    gamma2 = quad / n
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    if gamma2 <= 0:
        return -np.inf, 0.0
    return -0.5 * n * (log(2 * pi * gamma2) + 1.0) - 0.5 * logdet, gamma2


def fit_covariance_params(
    training_fields,
    cores: CoreMap,
    length_grid=DEFAULT_LENGTH_GRID,
    exponent_grid=DEFAULT_EXPONENT_GRID,
    jitter: float = 1e-8,
    return_table: bool = False,
):
    """Grid-search maximum-likelihood ``(length_scale, exponent)``.

    Every training field is fitted on its own; with several fields the
    per-field argmax parameters are averaged.  Ties go to the smallest
    ``(length_scale, exponent)`` pair.
    """
    fields = [np.asarray(f, dtype=float) for f in training_fields]
    if not fields:
        raise ParameterError("need at least one training field")
    if any(f.shape != (cores.n_cores,) for f in fields):
        raise ParameterError("training fields must have one value per core")
    if any(not 0 < k <= 2 for k in exponent_grid):
        raise ParameterError("exponent grid must lie in (0, 2]")
    grid = sorted((float(l), float(k)) for l in length_grid for k in exponent_grid)
    if not grid:
        raise ParameterError("empty grid")
    dist = cores.distances()
    table = np.full((len(fields), len(grid)), -np.inf)
    for gi, (ell, kap) in enumerate(grid):
        params = CovarianceParams(ell, kap)
        for fi, f in enumerate(fields):
            try:
                table[fi, gi] = profiled_log_likelihood(f, dist, params, jitter)[0]
            except np.linalg.LinAlgError:
                log_.debug("grid point (%g, %g) not PD", ell, kap)
                break
    best = []
    for fi in range(len(fields)):
        if not np.isfinite(table[fi]).any():
            raise ParameterError("covariance is not PD at any grid point")
        best.append(grid[int(np.argmax(table[fi]))])  # argmax returns the first maximum
    best = np.array(best)
    params = CovarianceParams(float(best[:, 0].mean()), float(best[:, 1].mean()))
    if return_table:
        return params, {"grid": grid, "loglik": table, "per_field": [tuple(b) for b in best]}
    return params
