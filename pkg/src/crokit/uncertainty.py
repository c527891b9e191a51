"""Contextual ellipsoidal uncertainty sets.

The set is ``E(mu, Sigma) = {xi : (xi - mu)^T Sigma^{-1} (xi - mu) <= 1}``
with ``Sigma = r L L^T`` for a lower-triangular ``L`` with positive
diagonal and a positive scale ``r``.  With that membership definition the
support function is ``sup_{xi in E} v^T xi = mu^T v + sqrt(v^T Sigma v)``
(note: Sigma itself, not its inverse, under the square root — the pairing
is fixed by duality and validated against a sampling oracle in the test
suite).

Membership uses a ``<= 1 + 1e-12`` boundary convention so that support
function maximizers always count as covered.  ``smooth_membership`` is the
differentiable surrogate used during training; it tends to the hard
indicator as the sharpness parameter grows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import chi2

from .autodiff import SetPredictorOutput, sigmoid, tri_size
from .exceptions import InputError, NumericError

Array = np.ndarray

BOUNDARY_SLACK = 1e-12


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoidal set with center ``mu`` and shape ``Sigma = r L L^T``."""

    mu: Array
    L: Array
    r: float

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=float)
        L = np.ascontiguousarray(self.L, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "r", float(self.r))
        m = mu.shape[0]
        if L.shape != (m, m):
            raise InputError("center and factor dimensions do not match")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(L)) and np.isfinite(self.r)):
            raise NumericError("non-finite ellipsoid parameters")
        if np.any(np.triu(L, 1) != 0.0):
            raise InputError("factor must be lower triangular")
        if np.any(np.diag(L) <= 0.0):
            raise NumericError("factor diagonal must be strictly positive")
        if self.r <= 0.0:
            raise NumericError("scale must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def sigma(self) -> Array:
        return self.r * (self.L @ self.L.T)

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "L_rows": self.L.tolist(), "r": self.r}

    @classmethod
    def from_json(cls, obj: dict) -> "Ellipsoid":
        return cls(np.asarray(obj["mu"], dtype=float), np.asarray(obj["L_rows"], dtype=float),
                   float(obj["r"]))


def build_ellipsoid(out: SetPredictorOutput) -> Ellipsoid:
    """Ellipsoid from raw predictor outputs: exp on the diagonal and scale."""
    return ellipsoid_from_raw(out.mu, out.L_raw, out.r_raw)


def ellipsoid_from_raw(mu: Array, l_raw: Array, r_raw: float) -> Ellipsoid:
    mu = np.asarray(mu, dtype=float)
    l_raw = np.asarray(l_raw, dtype=float)
    m = mu.shape[0]
    if l_raw.shape != (tri_size(m),):
        raise InputError("triangular entry count does not match the set dimension")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(l_raw)) and np.isfinite(r_raw)):
        raise NumericError("non-finite raw set parameters")
    rows, cols = np.tril_indices(m)
    L = np.zeros((m, m))
    L[rows, cols] = l_raw
    diag = np.arange(m)
    L[diag, diag] = np.exp(np.diag(L))
    return Ellipsoid(mu, L, float(np.exp(r_raw)))


def ellipsoid_raw_backward(ell: Ellipsoid, g_mu: Array, g_sigma: Array):
    """Pull a (d/d mu, d/d Sigma) pair back to the raw predictor outputs.

    ``g_sigma`` is the gradient with respect to the full symmetric matrix
    ``Sigma`` under the Frobenius pairing ``dLoss = <g_sigma, dSigma>``.
    Returns seeds for (mu, packed L entries, r_raw).
    """
    g_sigma = 0.5 * (g_sigma + g_sigma.T)
    m = ell.dim
    gL = 2.0 * ell.r * (g_sigma @ ell.L)
    rows, cols = np.tril_indices(m)
    seed_l = gL[rows, cols].copy()
    diag_pos = np.flatnonzero(rows == cols)
    seed_l[diag_pos] *= np.diag(ell.L)          # chain through exp on the diagonal
    seed_r = float(np.sum(g_sigma * (ell.L @ ell.L.T))) * ell.r
    return np.asarray(g_mu, dtype=float).copy(), seed_l, seed_r


def _whiten(ell: Ellipsoid, diff: Array) -> Array:
    """Solve L z = diff (vectorized over trailing columns)."""
    if np.any(np.diag(ell.L) == 0.0):
        raise NumericError("singular triangular factor")
    return solve_triangular(ell.L, diff, lower=True)


def mahalanobis_sq(ell: Ellipsoid, xi: Array) -> float:
    """(xi - mu)^T Sigma^{-1} (xi - mu) via triangular solves (never forms Sigma^{-1})."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (ell.dim,):
        raise InputError("point dimension does not match the set")
    z = _whiten(ell, xi - ell.mu)
    return float(z @ z) / ell.r


def mahalanobis_sq_many(ell: Ellipsoid, Xi: Array) -> Array:
    """Vectorized squared distances for rows of Xi."""
    Xi = np.asarray(Xi, dtype=float)
    Z = _whiten(ell, (Xi - ell.mu).T)
    return np.einsum("ij,ij->j", Z, Z) / ell.r


def contains(ell: Ellipsoid, xi: Array) -> bool:
    return mahalanobis_sq(ell, xi) <= 1.0 + BOUNDARY_SLACK


def contains_many(ell: Ellipsoid, Xi: Array) -> Array:
    return mahalanobis_sq_many(ell, Xi) <= 1.0 + BOUNDARY_SLACK


def smooth_membership(ell: Ellipsoid, xi: Array, beta: float) -> float:
    """Sigmoid surrogate of the membership indicator; exact 0.5 on the boundary."""
    if beta <= 0:
        raise InputError("sharpness must be positive")
    return float(sigmoid(beta * (1.0 - mahalanobis_sq(ell, xi))))


def smooth_membership_many(ell: Ellipsoid, Xi: Array, beta: float) -> Array:
    if beta <= 0:
        raise InputError("sharpness must be positive")
    return sigmoid(beta * (1.0 - mahalanobis_sq_many(ell, Xi)))


def smooth_membership_grads(ell: Ellipsoid, xi: Array, beta: float):
    """Value and gradients of the smooth membership w.r.t. (mu, Sigma).

    The Sigma gradient is for the full symmetric matrix under the
    Frobenius pairing, compatible with :func:`ellipsoid_raw_backward`.
    """
    xi = np.asarray(xi, dtype=float)
    e = xi - ell.mu
    z = _whiten(ell, e)
    d2 = float(z @ z) / ell.r
    y = float(sigmoid(beta * (1.0 - d2)))
    # Sigma^{-1} e via the second triangular solve
    w = solve_triangular(ell.L, z, lower=True, trans="T") / ell.r
    coeff = beta * y * (1.0 - y)
    g_mu = coeff * 2.0 * w
    g_sigma = coeff * np.outer(w, w)
    return y, g_mu, g_sigma


def support_function(ell: Ellipsoid, v: Array):
    """Support value ``mu^T v + sqrt(v^T Sigma v)`` and its maximizer.

    The maximizer lies on the set boundary for nonzero v and degenerates
    to the center at v = 0.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (ell.dim,):
        raise InputError("direction dimension does not match the set")
    sv = ell.sigma() @ v
    quad = float(v @ sv)
    if quad <= 0.0:
        return float(ell.mu @ v), ell.mu.copy()
    root = np.sqrt(quad)
    return float(ell.mu @ v) + root, ell.mu + sv / root


def gaussian_credible_ellipsoid(mean: Array, cov: Array, epsilon: float) -> Ellipsoid:
    """Central (1 - epsilon) region of a Gaussian as an Ellipsoid.

    Uses the chi-squared quantile with dim degrees of freedom as the
    shape-matrix scale; epsilon = 1 degenerates toward the center point.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    m = mean.shape[0]
    if not 0.0 < epsilon <= 1.0:
        raise InputError("epsilon must be in (0, 1]")
    q = float(chi2.ppf(1.0 - epsilon, df=m))
    L = np.linalg.cholesky(cov)
    if q <= 0.0:
        q = 1e-12  # epsilon = 1: collapse to a vanishingly small set around the mean
    return Ellipsoid(mean, L, q)
