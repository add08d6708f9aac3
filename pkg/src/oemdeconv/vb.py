"""Mean-field variational Bayes deconvolution."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from math import sqrt

import numpy as np
import scipy.linalg

from .model import (
    CouplingKernel,
    EstimateResult,
    Hyperparams,
    NumericalError,
    ParameterError,
    SpatialCovariance,
)
from .mcmc import initial_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VbConfig:
    """VB settings.

    The stopping threshold is ``sqrt(N1) * epsilon_scale``.
    ``half_residual_factor=False`` reproduces the noise-variance update
    without the 1/2 on the residual; ``degenerate_qx=False`` carries the full
    posterior covariance of x.
    """

    max_iters: int = 500
    epsilon_scale: float = 1e-5
    init: tuple | None = None
    half_residual_factor: bool = True
    degenerate_qx: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if not self.epsilon_scale > 0:
            raise ParameterError("epsilon_scale must be > 0")


@dataclass
class VbState:
    e_x: np.ndarray
    e_sigma2: float
    e_gamma2: float
    e_beta: float
    cov_x: np.ndarray | None = None
    iteration: int = 0
    residual: float = np.inf
    history: list = field(default_factory=list, repr=False)

    def copy(self) -> "VbState":
        return VbState(
            self.e_x.copy(), self.e_sigma2, self.e_gamma2, self.e_beta,
            None if self.cov_x is None else self.cov_x.copy(),
            self.iteration, self.residual, list(self.history),
        )


def _scaled_precision(HtH, Delta, lam, out=None):
    """``H^T H + lam Delta^{-1}``, i.e. the q(x) precision times E(sigma2)."""
    out = np.multiply(Delta.inverse, lam, out=out)
    out += HtH
    return out


class ShiftedSolver:
    """Solves ``(H^T H + lam Delta^{-1}) x = b`` for a slowly drifting ``lam``.

    Keeps the Cholesky factor from the last refactorization at ``lam_f`` and
    uses it to precondition conjugate gradients.  The preconditioned
    operator has its spectrum inside ``[min(1, r), max(1, r)]`` with
    ``r = lam / lam_f``, so a handful of steps suffice while ``r`` stays
    close to one; outside ``[1/max_ratio, max_ratio]`` it refactors.
    """

    def __init__(self, H: CouplingKernel, Delta: SpatialCovariance, HtH=None,
                 max_ratio: float = 1.3, rtol: float = 1e-14, max_cg: int = 40):
        self.H = H
        self.Delta = Delta
        self.HtH = H.gram() if HtH is None else HtH
        self.max_ratio = max_ratio
        self.rtol = rtol
        self.max_cg = max_cg
        self.work = np.empty_like(self.HtH)
        self.lam_f = None
        self.cf = None
        self.n_factor = 0
        self.n_cg = 0

    def factor(self, lam):
        A = _scaled_precision(self.HtH, self.Delta, lam, self.work)
        try:
            self.cf = scipy.linalg.cho_factor(A, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            self.cf = None
            raise NumericalError("q(x) precision is singular") from exc
        self.lam_f = lam
        self.n_factor += 1
        return self.cf

    def _pcg(self, lam, b, x):
        Hm, Dinv = self.H.matrix, self.Delta.inverse
        tol = self.rtol * float(np.linalg.norm(b))
        r = b - (Hm.T @ (Hm @ x) + lam * (Dinv @ x))
        z = scipy.linalg.cho_solve(self.cf, r, check_finite=False)
        p = z.copy()
        rz = float(r @ z)
        for _ in range(self.max_cg):
            if float(np.linalg.norm(r)) <= tol:
                return x
            Ap = Hm.T @ (Hm @ p) + lam * (Dinv @ p)
            step = rz / float(p @ Ap)
            x = x + step * p
            r = r - step * Ap
            z = scipy.linalg.cho_solve(self.cf, r, check_finite=False)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
            self.n_cg += 1
        return x if float(np.linalg.norm(r)) <= tol else None

    def solve(self, lam, b, x0=None):
        if self.cf is not None and x0 is not None:
            ratio = lam / self.lam_f
            if 1.0 / self.max_ratio <= ratio <= self.max_ratio:
                x = self._pcg(lam, b, np.array(x0, dtype=float))
                if x is not None:
                    return x
        return scipy.linalg.cho_solve(self.factor(lam), b, check_finite=False)


def vb_update_x(y, H: CouplingKernel, Delta: SpatialCovariance, state: VbState,
                degenerate: bool = True, HtH=None, work=None, solver: ShiftedSolver | None = None):
    """Mean (and, unless degenerate, covariance) of the Gaussian factor q(x).

    Returns ``(e_x, cov_x)`` with ``cov_x`` None in degenerate mode.  The
    precision is ``H^T H / E(sigma2) + Delta^{-1} / E(gamma2)``; it is
    factored after scaling by E(sigma2).  ``work`` is an optional N1 x N1
    scratch buffer that gets overwritten.  In degenerate mode a
    ``ShiftedSolver`` may be passed to reuse factorizations across calls.
    """
    if not (state.e_sigma2 > 0 and state.e_gamma2 > 0):
        raise ParameterError("scalar moments must be > 0")
    if HtH is None:
        HtH = H.gram()
    lam = state.e_sigma2 / state.e_gamma2
    rhs = H.rmatvec(np.asarray(y, dtype=float))
    if degenerate and solver is not None:
        return solver.solve(lam, rhs, state.e_x), None
    A = _scaled_precision(HtH, Delta, lam, work)
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("q(x) precision is singular") from exc
    if degenerate:
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False), None
    cov = scipy.linalg.cho_solve(cf, np.eye(len(rhs)), check_finite=False) * state.e_sigma2
    cov = 0.5 * (cov + cov.T)
    return cov @ rhs / state.e_sigma2, cov


def vb_update_sigma2(y, H: CouplingKernel, state: VbState, hyper: Hyperparams,
                     half_residual_factor: bool = True, HtH=None) -> float:
    r = np.asarray(y, dtype=float) - H.matrix @ state.e_x
    R = float(r @ r)
    if state.cov_x is not None:
        if HtH is None:
            HtH = H.gram()
        R += float(np.sum(HtH * state.cov_x))
    c = 0.5 if half_residual_factor else 1.0
    n = len(r)
    return (state.e_beta + c * R) / (n / 2 + hyper.alpha - 1)


def vb_update_gamma2(Delta: SpatialCovariance, state: VbState, hyper: Hyperparams) -> float:
    """Mean of q(gamma2).

    For very small N1 the denominator ``N1/2 + eta - 1`` is close to zero, so
    with the default weak prior the estimate is large and sensitive.
    """
    Q = Delta.quad_inv(state.e_x)
    if state.cov_x is not None:
        Q += float(np.sum(Delta.inverse * state.cov_x))
    n = len(state.e_x)
    return (hyper.nu + 0.5 * Q) / (n / 2 + hyper.eta - 1)


def vb_update_beta(state: VbState, hyper: Hyperparams) -> float:
    s = state.e_sigma2
    if not s > 0:
        raise ParameterError("E(sigma2) must be > 0")
    return (hyper.alpha + hyper.alpha_o) * hyper.beta_o * s / (hyper.beta_o + s)


def vb_cycle(y, H, Delta, hyper, state: VbState, config: VbConfig, HtH=None, work=None,
             solver: ShiftedSolver | None = None) -> VbState:
    """One pass of the x, sigma2, gamma2, beta updates; returns a new state."""
    new = state.copy()
    new.e_x, new.cov_x = vb_update_x(y, H, Delta, new, config.degenerate_qx, HtH, work, solver)
    new.e_sigma2 = vb_update_sigma2(y, H, new, hyper, config.half_residual_factor, HtH)
    new.e_gamma2 = vb_update_gamma2(Delta, new, hyper)
    new.e_beta = vb_update_beta(new, hyper)
    new.iteration = state.iteration + 1
    new.residual = (
        float(np.linalg.norm(new.e_x - state.e_x))
        + abs(new.e_sigma2 - state.e_sigma2)
        + abs(new.e_gamma2 - state.e_gamma2)
        + abs(new.e_beta - state.e_beta)
    )
    return new


def run_vb(y, H: CouplingKernel, Delta: SpatialCovariance,
           hyper: Hyperparams = Hyperparams(), config: VbConfig = VbConfig()):
    """Iterate the VB updates until the summed change drops below ``sqrt(N1) * epsilon_scale``.

    Returns ``(EstimateResult, VbState)``.  Positivity of x is not enforced.
    Hitting ``max_iters`` sets ``converged=False`` rather than raising.
    """
    t0 = time.perf_counter()
    y = np.asarray(y, dtype=float)
    n = y.size
    eps = sqrt(n) * config.epsilon_scale
    HtH = H.gram()
    if config.init is not None:
        x0, s0, b0, g0 = config.init
    else:
        x0, s0, b0, g0 = initial_state(y, H, hyper)
    state = VbState(np.asarray(x0, dtype=float), s0, g0, b0)
    solver = ShiftedSolver(H, Delta, HtH)
    converged = False
    while state.iteration < config.max_iters:
        state = vb_cycle(y, H, Delta, hyper, state, config, HtH, solver.work, solver)
        state.history.append(state.residual)
        if state.residual <= eps:
            converged = True
            break
    if not converged:
        log.info("VB stopped at max_iters=%d (residual %.3g > %.3g)",
                 config.max_iters, state.residual, eps)
    result = EstimateResult(
        x=state.e_x.copy(), sigma2=state.e_sigma2, gamma2=state.e_gamma2, beta=state.e_beta,
        method="vb", converged=converged, n_iter=state.iteration,
        wall_time_s=time.perf_counter() - t0,
        diagnostics={"residual": state.residual, "epsilon": eps,
                     "n_factor": solver.n_factor, "n_cg": solver.n_cg},
    )
    return result, state
