"""
MAP deconvolution by ADMM with fixed regularization.

Solves ``min 1/2 ||H x - y||^2 + (lam/2) x^T Delta^{-1} x`` subject to
``x >= 0`` by splitting ``u = x`` and projecting ``u`` on the orthant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from math import sqrt

import numpy as np
import scipy.linalg

from .model import (
    CouplingKernel,
    EstimateResult,
    NumericalError,
    ParameterError,
    SpatialCovariance,
)
from .synth import rmse


@dataclass(frozen=True)
class AdmmConfig:
    lam: float = 1.0
    mu: float = 1.0
    max_iters: int = 2000
    epsilon_scale: float = 1e-5
    lambda_grid: tuple | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ParameterError("mu must be > 0")
        if not self.lam >= 0:
            raise ParameterError("lambda must be >= 0")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")


@dataclass
class AdmmState:
    x: np.ndarray
    u: np.ndarray
    d1: np.ndarray
    primal_residual: float = np.inf
    iteration: int = 0


def admm_u_update(x, d1) -> np.ndarray:
    return np.maximum(np.asarray(x) - np.asarray(d1), 0.0)


class XSolver:
    """Cached Cholesky factor of ``H^T H + lam Delta^{-1} + mu I``."""

    def __init__(self, H: CouplingKernel, Delta: SpatialCovariance, lam: float, mu: float):
        A = H.gram() + lam * Delta.inverse
        A[np.diag_indices_from(A)] += mu
        self.matrix = A
        self.mu = mu
        try:
            self.cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("ADMM system matrix is not positive definite") from exc

    def __call__(self, Hty, u, d1):
        return scipy.linalg.cho_solve(self.cf, Hty + self.mu * (u + d1), check_finite=False)


def admm_x_update(y, H, Delta, u, d1, config: AdmmConfig) -> np.ndarray:
    solver = XSolver(H, Delta, config.lam, config.mu)
    return solver(H.rmatvec(np.asarray(y, dtype=float)), u, d1)


def qp_objective(x, y, H: CouplingKernel, Delta: SpatialCovariance, lam: float) -> float:
    r = H.matrix @ x - y
    return 0.5 * float(r @ r) + 0.5 * lam * float(x @ Delta.inverse @ x)


def run_admm(y, H: CouplingKernel, Delta: SpatialCovariance, config: AdmmConfig = AdmmConfig(),
             x0=None, track_objective: bool = False):
    """Run ADMM until ``||u - x|| <= sqrt(N1) * epsilon_scale``.

    The returned estimate is the projected iterate ``u``, so it is always
    feasible.  Returns ``(EstimateResult, AdmmState)``.
    """
    t0 = time.perf_counter()
    y = np.asarray(y, dtype=float)
    n = y.size
    eps = sqrt(n) * config.epsilon_scale
    solve = XSolver(H, Delta, config.lam, config.mu)
    Hty = H.rmatvec(y)
    x = np.maximum(y, 0.0) if x0 is None else np.asarray(x0, dtype=float).copy()
    d1 = np.zeros(n)
    u = x.copy()
    objective = []
    state = AdmmState(x, u, d1)
    converged = False
    for k in range(1, config.max_iters + 1):
        u = admm_u_update(x, d1)
        x = solve(Hty, u, d1)
        d1 = d1 - (x - u)
        res = float(np.linalg.norm(u - x))
        if track_objective:
            objective.append(qp_objective(u, y, H, Delta, config.lam))
        state = AdmmState(x, u, d1, res, k)
        if res <= eps:
            converged = True
            break
    diagnostics = {"primal_residual": state.primal_residual, "epsilon": eps, "lam": config.lam}
    if track_objective:
        diagnostics["objective"] = objective
    result = EstimateResult(
        x=state.u.copy(), method="admm", converged=converged, n_iter=state.iteration,
        wall_time_s=time.perf_counter() - t0, diagnostics=diagnostics,
    )
    return result, state


def default_lambda_grid(H: CouplingKernel, Delta: SpatialCovariance, n: int = 5) -> np.ndarray:
    """Log-spaced grid over ``[1e-2, 1e2] * tr(H^T H) / tr(Delta^{-1})``."""
    HtH_trace = float(H.matrix.multiply(H.matrix).sum())
    scale = HtH_trace / float(np.trace(Delta.inverse))
    return scale * np.logspace(-2, 2, n)


def lambda_sweep(y, H: CouplingKernel, Delta: SpatialCovariance, x_true=None,
                 config: AdmmConfig = AdmmConfig()):
    """Run ADMM for every lambda in the grid.

    Returns a list of dicts with keys ``lam``, ``result`` and, when
    ``x_true`` is given, ``rmse`` and ``best`` (True on the lowest-RMSE row,
    first one on ties in sorted-lambda order).
    """
    grid = config.lambda_grid
    if grid is None:
        grid = default_lambda_grid(H, Delta)
    grid = [float(v) for v in grid]
    if not grid:
        raise ParameterError("lambda_grid must be non-empty")
    rows = []
    for lam in grid:
        cfg = AdmmConfig(lam=lam, mu=config.mu, max_iters=config.max_iters,
                         epsilon_scale=config.epsilon_scale)
        res, _ = run_admm(y, H, Delta, cfg)
        row = {"lam": lam, "result": res}
        if x_true is not None:
            row["rmse"] = rmse(x_true, res.x)
        rows.append(row)
    if x_true is not None:
        order = sorted(range(len(rows)), key=lambda i: (rows[i]["rmse"], rows[i]["lam"]))
        for i, row in enumerate(rows):
            row["best"] = i == order[0]
    return rows


def best_of_sweep(rows) -> EstimateResult:
    for row in rows:
        if row.get("best"):
            return row["result"]
    raise ParameterError("sweep has no x_true-selected row")
