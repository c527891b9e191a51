"""Sensitivities of optimizers through their optimality conditions.

Two implicit-function-theorem computations:

* :func:`kkt_sensitivity` differentiates the robust-portfolio solution
  through its KKT system, giving d x*/d mu and d x*/d Sigma.  Strictly
  active simplex constraints (multiplier above 1e-6) are treated as
  equalities; weakly active ones are dropped.
* :func:`logistic_sensitivity` differentiates the fitted coverage
  regressor through the stationarity of its ridge-regularized negative
  log-likelihood, giving d phi*/d y for every label in the batch.

Sigma derivatives use the symmetric-direction convention: entry
``dx_dsigma[:, a, b]`` is the directional derivative of x* along
``(e_a e_b^T + e_b e_a^T) / 2``, so that for any symmetric perturbation
``dSigma`` the first-order change is ``sum_ab dx_dsigma[:, a, b] *
dSigma[a, b]`` (a plain Frobenius pairing).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import CoverageNet, ParamVector
from .exceptions import InputError, NumericError
from .solver import KKTPoint, RobustProblem, _exact_hessian, kkt_residual
from .uncertainty import Ellipsoid

logger = logging.getLogger("crokit")

Array = np.ndarray

STRICT_ACTIVE = 1e-6


@dataclass
class SolutionSensitivity:
    """Jacobians of the robust decision w.r.t. the set parameters."""

    dx_dmu: Array        # (m, m)
    dx_dsigma: Array     # (m, m, m), symmetric in the trailing indices
    degenerate: bool = False


def kkt_sensitivity(problem: RobustProblem, ell: Ellipsoid, point: KKTPoint,
                    *, check_residual: bool = True) -> SolutionSensitivity:
    """Implicit differentiation of the KKT system at an optimal point.

    Solves ``dG/d(x, lam, nu) . J = -dG/d(mu, Sigma)`` where G stacks
    stationarity, the simplex equality, and the strictly active bound
    constraints.  A singular system (degenerate active set) falls back to
    least squares with a warning.
    """
    m = problem.m
    x = np.asarray(point.x, dtype=float)
    if check_residual and kkt_residual(problem, ell, point) > 1e-6:
        raise InputError("sensitivity requires a point satisfying the KKT conditions")
    Sigma = ell.sigma()
    H = _exact_hessian(Sigma, x)
    active = np.flatnonzero(np.asarray(point.lam) > STRICT_ACTIVE)
    na = active.size
    dim = m + 1 + na

    M = np.zeros((dim, dim))
    M[:m, :m] = H
    M[:m, m] = 1.0
    M[m, :m] = 1.0
    for j, i in enumerate(active):
        M[:m, m + 1 + j][i] = -1.0
        M[m + 1 + j, i] = 1.0

    # right-hand sides: -dG/dmu and -dG/dSigma (only the stationarity rows move)
    sx = Sigma @ x
    s = np.sqrt(float(x @ sx))
    w = sx / s

    n_dirs = m * (m + 1) // 2
    rhs = np.zeros((dim, m + n_dirs))
    rhs[:m, :m] = np.eye(m)  # d(grad f)/d mu = -I, negated
    rows, cols = np.tril_indices(m)
    for k, (a, b) in enumerate(zip(rows, cols)):
        D = np.zeros((m, m))
        D[a, b] += 0.5
        D[b, a] += 0.5
        dgrad = D @ x / s - w * float(x @ D @ x) / (2.0 * s * s)
        rhs[:m, m + k] = -dgrad

    degenerate = False
    try:
        sol = np.linalg.solve(M, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite solve")
    except np.linalg.LinAlgError:
        degenerate = True
        logger.warning("singular KKT Jacobian; falling back to least squares")
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)

    dx_dmu = sol[:m, :m]
    dx_dsigma = np.zeros((m, m, m))
    for k, (a, b) in enumerate(zip(rows, cols)):
        dx_dsigma[:, a, b] = sol[:m, m + k]
        dx_dsigma[:, b, a] = sol[:m, m + k]
    return SolutionSensitivity(dx_dmu=dx_dmu, dx_dsigma=dx_dsigma, degenerate=degenerate)


@dataclass
class RegressorSensitivity:
    """d phi*/d y for one fitted batch, one column per sample."""

    dphi_dy: Array  # (n_params, n_batch)


def logistic_sensitivity(net: CoverageNet, phi_star: ParamVector, Psi: Array,
                         y: Array, ridge: float) -> RegressorSensitivity:
    """Sensitivity of the fitted regressor parameters to the labels.

    Requires ``phi_star`` to be (near) stationary for the
    ridge-regularized NLL on ``(Psi, y)``; labels may be soft values in
    [0, 1].  If the Hessian is not positive definite the ridge is raised
    once before giving up.
    """
    Psi = np.asarray(Psi, dtype=float)
    y = np.asarray(y, dtype=float)
    if Psi.shape[0] != y.shape[0]:
        raise InputError("covariates and labels disagree on the batch size")
    gnorm = float(np.linalg.norm(net.nll_grad(phi_star, Psi, y, ridge), np.inf))
    if gnorm > 1e-6:
        raise InputError(f"regressor is not stationary (gradient norm {gnorm:.2e})")
    G = net.logit_grads(phi_star, Psi)          # (n, p)
    cross = -G.T / Psi.shape[0]                 # d(grad NLL)/d y_j = -grad z_j / n
    for attempt, rdg in enumerate((ridge, ridge * 10.0 + 1e-8)):
        H = net.nll_hessian(phi_star, Psi, y, rdg)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            if attempt == 1:
                raise NumericError("regressor Hessian is not positive definite")
            logger.warning("indefinite regressor Hessian; retrying with a larger ridge")
            continue
        dphi = np.linalg.solve(H, -cross)
        return RegressorSensitivity(dphi_dy=dphi)
    raise NumericError("regressor Hessian is not positive definite")
