"""
Shared model objects for fibre-bundle deconvolution.

The observation model is ``y = H x + w`` where ``x`` holds the central
intensities of the N1 fibre cores, ``H`` is the inter-core cross-coupling
operator and ``w`` is white Gaussian noise.  The prior on ``x`` is a
zero-mean Gaussian with covariance ``gamma2 * Delta`` restricted to the
nonnegative orthant, with conjugate inverse-gamma / gamma hyperpriors on the
noise variance ``sigma2``, its scale ``beta`` and on ``gamma2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma, log, pi, sqrt

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist, squareform

__all__ = [
    "ParameterError",
    "NumericalError",
    "CoreMap",
    "KernelParams",
    "CouplingKernel",
    "CovarianceParams",
    "SpatialCovariance",
    "Hyperparams",
    "EstimateResult",
    "build_coupling_kernel",
    "build_covariance",
    "cross_covariance",
    "forward_apply",
    "add_noise",
    "log_likelihood",
    "log_posterior",
]

#: Approximate centre-to-centre distance between neighbouring cores, pixels.
CORE_SPACING = 3.3


class ParameterError(ValueError):
    """Invalid argument or parameter value."""


class NumericalError(ArithmeticError):
    """A factorization or solve failed."""


@dataclass(frozen=True, eq=False)
class CoreMap:
    """Positions of the fibre cores inside a ``width`` x ``height`` image.

    ``positions`` is an (N1, 2) array of ``(x, y)`` = (column, row)
    coordinates in pixels, 0-based and sub-pixel capable.
    """

    width: int
    height: int
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, copy=True)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ParameterError("positions must be a non-empty (N, 2) array")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("width and height must be positive")
        if not np.all(np.isfinite(pos)):
            raise ParameterError("positions must be finite")
        inside = (
            (pos[:, 0] >= 0) & (pos[:, 0] < self.width)
            & (pos[:, 1] >= 0) & (pos[:, 1] < self.height)
        )
        if not inside.all():
            raise ParameterError("all core positions must lie inside the image")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise ParameterError("core positions must be distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_cores(self) -> int:
        return self.positions.shape[0]

    def pixel_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) integer indices of the pixel holding each core centre."""
        col = np.clip(np.rint(self.positions[:, 0]).astype(int), 0, self.width - 1)
        row = np.clip(np.rint(self.positions[:, 1]).astype(int), 0, self.height - 1)
        return row, col

    def distances(self) -> np.ndarray:
        """Dense (N1, N1) matrix of Euclidean inter-core distances."""
        if self.n_cores == 1:
            return np.zeros((1, 1))
        return squareform(pdist(self.positions))

    def permuted(self, order) -> "CoreMap":
        return CoreMap(self.width, self.height, self.positions[np.asarray(order)])


@dataclass(frozen=True)
class KernelParams:
    """Generalized-Gaussian cross-coupling parameters.

    ``truncation_radius`` of 0 disables truncation.
    """

    alpha_h: float
    beta_h: float
    truncation_radius: float = 6 * CORE_SPACING
    row_normalize: bool = False

    def __post_init__(self):
        if not self.alpha_h > 0 or not self.beta_h > 0:
            raise ParameterError("alpha_h and beta_h must be > 0")
        if not self.truncation_radius >= 0:
            raise ParameterError("truncation_radius must be >= 0")

    @classmethod
    def gaussian(cls, sigma2_h: float, **kwargs) -> "KernelParams":
        """Plain Gaussian kernel ``exp(-d^2 / (2 sigma2_h))``."""
        if not sigma2_h > 0:
            raise ParameterError("sigma2_h must be > 0")
        return cls(alpha_h=sqrt(2.0 * sigma2_h), beta_h=2.0, **kwargs)


@dataclass(frozen=True, eq=False)
class CouplingKernel:
    matrix: sp.csr_matrix
    params: KernelParams | None = None

    @classmethod
    def from_dense(cls, matrix, params: KernelParams | None = None) -> "CouplingKernel":
        """Wrap an explicit square matrix (hand-built test operators, H = I, ...)."""
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ParameterError("coupling matrix must be square")
        return cls(sp.csr_matrix(m), params)

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def gram(self) -> np.ndarray:
        """Dense ``H^T H``."""
        return np.asarray((self.matrix.T @ self.matrix).toarray())

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix.T @ v


@dataclass(frozen=True)
class CovarianceParams:
    length_scale: float
    exponent: float

    def __post_init__(self):
        if not self.length_scale > 0 or not self.exponent > 0:
            raise ParameterError("length_scale and exponent must be > 0")


@dataclass(frozen=True, eq=False)
class SpatialCovariance:
    """Prior spatial covariance with its Cholesky factor and inverse cached."""

    matrix: np.ndarray
    params: CovarianceParams | None
    jitter: float
    factor: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def quad_inv(self, x: np.ndarray) -> float:
        """``x^T Delta^{-1} x`` via the cached factor."""
        z = scipy.linalg.solve_triangular(self.factor, x, lower=True)
        return float(z @ z)


@dataclass(frozen=True)
class Hyperparams:
    """Fixed hyperprior parameters.

    ``alpha``: IG shape on sigma2; ``alpha_o``, ``beta_o``: gamma shape and
    scale on beta; ``eta``, ``nu``: IG shape and scale on gamma2.
    """

    alpha: float = 10.0
    alpha_o: float = 10.0
    beta_o: float = 0.1
    eta: float = 1e-3
    nu: float = 1e-3

    def __post_init__(self):
        for name in ("alpha", "alpha_o", "beta_o", "eta", "nu"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")


@dataclass
class EstimateResult:
    """Output common to all three estimators.

    ``sigma2``, ``gamma2`` and ``beta`` are ``None`` when the method does not
    estimate them (ADMM).
    """

    x: np.ndarray
    sigma2: float | None = None
    gamma2: float | None = None
    beta: float | None = None
    method: str = ""
    converged: bool = True
    n_iter: int = 0
    wall_time_s: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _gen_gaussian(d: np.ndarray, scale: float, shape: float) -> np.ndarray:
    return np.exp(-((d / scale) ** shape))


def build_coupling_kernel(cores: CoreMap, params: KernelParams) -> CouplingKernel:
    """Sparse cross-coupling matrix ``H[i, j] = exp(-(d_ij / alpha_h)^beta_h)``.

    Entries beyond ``params.truncation_radius`` are dropped.  With
    ``row_normalize`` every row is scaled to unit sum.
    """
    n = cores.n_cores
    if params.truncation_radius > 0:
        tree = cKDTree(cores.positions)
        dmat = tree.sparse_distance_matrix(
            tree, params.truncation_radius, output_type="coo_matrix"
        )
        # self pairs may or may not be stored (explicit zeros); add them once
        off = dmat.row != dmat.col
        rows = np.concatenate([dmat.row[off], np.arange(n)])
        cols = np.concatenate([dmat.col[off], np.arange(n)])
        dist = np.concatenate([dmat.data[off], np.zeros(n)])
        vals = _gen_gaussian(dist, params.alpha_h, params.beta_h)
        H = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    else:
        H = sp.csr_matrix(_gen_gaussian(cores.distances(), params.alpha_h, params.beta_h))
    H.sum_duplicates()
    H.sort_indices()
    if not np.all(np.isfinite(H.data)):
        raise NumericalError("non-finite coupling entries")
    if params.row_normalize:
        rowsum = np.asarray(H.sum(axis=1)).ravel()
        H = sp.diags(1.0 / rowsum) @ H
        H = sp.csr_matrix(H)
    return CouplingKernel(matrix=H, params=params)


def cross_covariance(a: np.ndarray, b: np.ndarray, params: CovarianceParams) -> np.ndarray:
    """``exp(-(|a_i - b_j| / l)^kappa)`` between two point sets."""
    return _gen_gaussian(cdist(a, b), params.length_scale, params.exponent)


def build_covariance(
    cores: CoreMap, params: CovarianceParams, jitter: float = 1e-8
) -> SpatialCovariance:
    """Prior covariance ``Delta[n, m] = exp(-(d_nm / l)^kappa)`` plus diagonal jitter."""
    if jitter < 0:
        raise ParameterError("jitter must be >= 0")
    delta = _gen_gaussian(cores.distances(), params.length_scale, params.exponent)
    if jitter:
        delta[np.diag_indices_from(delta)] += jitter
    return covariance_from_matrix(delta, params, jitter)


def covariance_from_matrix(delta, params: CovarianceParams | None = None,
                           jitter: float = 0.0) -> SpatialCovariance:
    """Factor an explicit covariance matrix (already including any jitter)."""
    delta = np.array(delta, dtype=float)
    if delta.ndim != 2 or delta.shape[0] != delta.shape[1]:
        raise ParameterError("covariance must be square")
    try:
        factor = scipy.linalg.cholesky(delta, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance not PD; increase jitter or reduce l") from exc
    inverse = scipy.linalg.cho_solve((factor, True), np.eye(len(delta)))
    inverse = 0.5 * (inverse + inverse.T)
    for arr in (delta, factor, inverse):
        arr.setflags(write=False)
    return SpatialCovariance(delta, params, jitter, factor, inverse)


def forward_apply(H: CouplingKernel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (H.shape[1],):
        raise ParameterError(f"x has shape {x.shape}, expected ({H.shape[1]},)")
    return H.matrix @ x


def add_noise(y_clean: np.ndarray, sigma2_n: float, rng_seed) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma2_n)`` noise; deterministic for a fixed seed."""
    if sigma2_n < 0:
        raise ParameterError("noise variance must be >= 0")
    y_clean = np.asarray(y_clean, dtype=float)
    if sigma2_n == 0:
        return y_clean.copy()
    rng = np.random.default_rng(rng_seed)
    return y_clean + sqrt(sigma2_n) * rng.standard_normal(y_clean.shape)


def log_likelihood(y, x, sigma2: float, H: CouplingKernel) -> float:
    if not sigma2 > 0:
        raise ParameterError("sigma2 must be > 0")
    r = np.asarray(y, dtype=float) - forward_apply(H, x)
    n = r.size
    return -0.5 * n * log(2 * pi * sigma2) - float(r @ r) / (2 * sigma2)


def _log_invgamma(v, shape, scale):
    return shape * log(scale) - lgamma(shape) - (shape + 1) * log(v) - scale / v


def _log_gamma(v, shape, scale):
    return -lgamma(shape) - shape * log(scale) + (shape - 1) * log(v) - v / scale


def log_posterior(
    x,
    sigma2: float,
    gamma2: float,
    beta: float,
    y,
    H: CouplingKernel,
    Delta: SpatialCovariance,
    hyper: Hyperparams = Hyperparams(),
) -> float:
    """Unnormalized joint log-posterior over ``(x, sigma2, gamma2, beta)``.

    The truncated prior on ``x`` keeps its ``gamma2^{-N1/2}`` factor (exact,
    because the orthant is a cone) but drops the orthant-probability constant,
    which depends only on ``Delta``.  Returns ``-inf`` outside the support.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        return -np.inf
    if not (sigma2 > 0 and gamma2 > 0 and beta > 0):
        return -np.inf
    n = x.size
    lp = log_likelihood(y, x, sigma2, H)
    lp += -0.5 * n * log(2 * pi * gamma2) - 0.5 * Delta.logdet()
    lp -= Delta.quad_inv(x) / (2 * gamma2)
    lp += _log_invgamma(sigma2, hyper.alpha, beta)
    lp += _log_gamma(beta, hyper.alpha_o, hyper.beta_o)
    lp += _log_invgamma(gamma2, hyper.eta, hyper.nu)
    return float(lp)
