"""Robust problem solver for the portfolio instance.

With the bilinear cost ``c(x, xi) = -xi^T x`` and an unbounded domain for
xi, the dual reformulation of the min-max problem collapses its auxiliary
direction variable onto x, leaving the convex program

    min_{x in simplex}  f(x) = -mu^T x + sqrt(x^T Sigma x)

whose optimum equals the worst-case cost over the ellipsoid.  The solver
is a trust-region method: quadratic model with the exact gradient and a
BFGS approximation of the curvature, feasibility kept by projecting model
steps onto the simplex, radius shrunk x0.25 / grown x2.0 around an
acceptance ratio of 0.1.  Once the projected gradient is small the method
switches to Newton steps on the identified active face, which drives the
KKT residual to machine precision; multipliers are recovered from the
stationarity equation by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError, NumericError
from .uncertainty import Ellipsoid

Array = np.ndarray

FEAS_TOL = 1e-8
ACTIVE_TOL = 1e-8
ACCEPT_RATIO = 0.1
GROW_RATIO = 0.75


@dataclass(frozen=True)
class RobustProblem:
    """Portfolio robust problem: simplex feasible set, cost -xi^T x.

    ``domain_radius`` is the radius of the ball containing xi; only the
    unbounded case ships (it is what collapses the dual variable), but the
    field keeps the general interface explicit.
    """

    m: int
    domain_radius: float = np.inf

    def __post_init__(self):
        if self.m < 1:
            raise InputError("need at least one asset")
        if not np.isinf(self.domain_radius):
            raise InputError("only the unbounded-domain portfolio instance is supported")

    def cost(self, x: Array, xi: Array) -> float:
        return float(-np.asarray(xi, dtype=float) @ np.asarray(x, dtype=float))

    def is_feasible(self, x: Array, tol: float = FEAS_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == (self.m,) and abs(x.sum() - 1.0) <= tol and np.all(x >= -tol)

    def uniform_start(self) -> Array:
        return np.full(self.m, 1.0 / self.m)


@dataclass
class KKTPoint:
    """Primal-dual solution of the reformulated robust problem."""

    x: Array
    v: Array
    lam: Array
    nu: Array
    objective: float
    iterations: int
    converged: bool


class WarmStartBuffer:
    """Per-sample feasible starting points, carried across epochs."""

    def __init__(self, n: int, m: int):
        self.points = np.full((n, m), 1.0 / m)
        self.m = m

    def __len__(self) -> int:
        return self.points.shape[0]

    def get(self, i: int) -> Array:
        return self.points[i].copy()

    def update(self, i: int, x: Array) -> None:
        x = np.asarray(x, dtype=float)
        if abs(x.sum() - 1.0) > FEAS_TOL or np.any(x < -FEAS_TOL):
            raise InputError("warm start buffer only stores feasible points")
        self.points[i] = x


def project_simplex(v: Array) -> Array:
    """Euclidean projection onto the unit simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def worst_case_objective(ell: Ellipsoid, x: Array):
    """Closed-form max of -xi^T x over the ellipsoid, and its maximizer."""
    x = np.asarray(x, dtype=float)
    if x.shape != (ell.dim,):
        raise InputError("decision dimension does not match the set")
    sx = ell.sigma() @ x
    quad = float(x @ sx)
    if quad <= 0.0:
        raise NumericError("degenerate shape matrix under the decision vector")
    root = np.sqrt(quad)
    value = float(-ell.mu @ x) + root
    worst_xi = ell.mu - sx / root
    return value, worst_xi


def _objective_and_grad(mu: Array, Sigma: Array, x: Array):
    sx = Sigma @ x
    root = np.sqrt(max(float(x @ sx), 0.0))
    if root == 0.0:
        raise NumericError("degenerate shape matrix under the decision vector")
    return float(-mu @ x) + root, -mu + sx / root


def _exact_hessian(Sigma: Array, x: Array) -> Array:
    sx = Sigma @ x
    root = np.sqrt(float(x @ sx))
    w = sx / root
    return Sigma / root - np.outer(w, w) / root


def _clip_step(x: Array, p: Array, radius: float) -> Array:
    nrm = np.linalg.norm(p)
    if nrm <= radius or nrm == 0.0:
        return p
    # shrinking toward x stays inside the simplex (convexity)
    return p * (radius / nrm)


def _solve_subproblem(g: Array, B: Array, x: Array, radius: float, iters: int = 30) -> Array:
    """Approximate min of the quadratic model over simplex & trust ball."""

    def model(p):
        return float(g @ p + 0.5 * p @ B @ p)

    best = np.zeros_like(x)
    best_val = 0.0
    # projected Newton candidate
    try:
        pn = np.linalg.solve(B, -g)
        cand = _clip_step(x, project_simplex(x + pn) - x, radius)
        if model(cand) < best_val:
            best, best_val = cand, model(cand)
    except np.linalg.LinAlgError:
        pass
    # projected gradient on the model, backtracking step size
    diag_scale = float(np.trace(B)) / B.shape[0]
    t = 1.0 / max(diag_scale, 1e-12)
    p = best.copy()
    p_val = best_val
    stalls = 0
    for _ in range(iters):
        mg = g + B @ p
        cand = _clip_step(x, project_simplex(x + p - t * mg) - x, radius)
        c_val = model(cand)
        if c_val < p_val - 1e-16 * (1.0 + abs(p_val)):
            p, p_val = cand, c_val
            stalls = 0
            if p_val < best_val:
                best, best_val = p, p_val
        else:
            t *= 0.5
            stalls += 1
            if stalls > 4 or t < 1e-12:
                break
    return best


def _recover_multipliers(x: Array, g: Array):
    """Least-squares fit of stationarity g - lam + nu 1 = 0, lam >= 0."""
    active = x <= ACTIVE_TOL
    if np.all(active):
        active = x < x.max()
    nu = -float(np.mean(g[~active]))
    lam = np.where(active, g + nu, 0.0)
    lam = np.maximum(lam, 0.0)
    lam[x > ACTIVE_TOL] = 0.0  # complementarity: zero multipliers off the active set
    return lam, np.array([nu])


def kkt_residual(problem: RobustProblem, ell: Ellipsoid, point: KKTPoint) -> float:
    """Max-norm of the stacked KKT residual at the given primal-dual point."""
    x = np.asarray(point.x, dtype=float)
    if x.shape != (problem.m,) or ell.dim != problem.m:
        raise InputError("dimension mismatch in KKT residual")
    _, g = _objective_and_grad(ell.mu, ell.sigma(), x)
    lam = np.asarray(point.lam, dtype=float)
    nu = float(np.asarray(point.nu, dtype=float).ravel()[0])
    stationarity = g - lam + nu
    primal = max(abs(x.sum() - 1.0), float(np.max(np.maximum(-x, 0.0))))
    dual = float(np.max(np.maximum(-lam, 0.0)))
    comp = float(np.max(np.abs(lam * x)))
    return max(float(np.max(np.abs(stationarity))), primal, dual, comp)


def _polish_active_set(mu, Sigma, x, max_iters):
    """Newton steps on the identified active face; returns (x, iterations)."""
    m = x.size
    used = 0
    while used < max_iters:
        f0, g = _objective_and_grad(mu, Sigma, x)
        free = np.flatnonzero(x > ACTIVE_TOL)
        # release an active coordinate whose implied multiplier is negative
        active = np.flatnonzero(x <= ACTIVE_TOL)
        if active.size and free.size:
            nu = -float(np.mean(g[free]))
            lam_active = g[active] + nu
            worst = int(np.argmin(lam_active))
            if lam_active[worst] < -1e-12:
                free = np.sort(np.append(free, active[worst]))
        k = free.size
        if k <= 1:
            break
        # null-space basis of {sum p = 0} restricted to the free coordinates
        Z = np.zeros((m, k - 1))
        Z[free[:-1], np.arange(k - 1)] = 1.0
        Z[free[-1], :] = -1.0
        gz = Z.T @ g
        if np.linalg.norm(gz, np.inf) < 1e-14:
            break
        H = _exact_hessian(Sigma, x)
        Hz = Z.T @ H @ Z
        ridge = 1e-14 * max(float(np.trace(Hz)) / (k - 1), 1.0)
        try:
            step = Z @ np.linalg.solve(Hz + ridge * np.eye(k - 1), -gz)
        except np.linalg.LinAlgError:
            break
        used += 1
        # backtracking; projection keeps the iterate feasible
        t = 1.0
        accepted = False
        for _ in range(40):
            x_new = project_simplex(x + t * step)
            f_new, _ = _objective_and_grad(mu, Sigma, x_new)
            if f_new <= f0 and not np.array_equal(x_new, x):
                x = x_new
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    return x, used


def solve_cro(problem: RobustProblem, ell: Ellipsoid, warm_start: Array,
              max_steps: int, *, converge_tol: float = 1e-8) -> KKTPoint:
    """K-step trust-region solve of the reformulated robust problem.

    The objective never increases across accepted iterations.  With a
    large step budget the returned point satisfies the KKT conditions to
    ``converge_tol`` and is flagged converged.
    """
    if max_steps < 1:
        raise InputError("need at least one trust-region step")
    x = np.asarray(warm_start, dtype=float)
    if not problem.is_feasible(x):
        raise InputError("warm start is infeasible")
    if ell.dim != problem.m:
        raise InputError("set dimension does not match the problem")
    x = project_simplex(x)
    mu = ell.mu
    Sigma = ell.sigma()
    if not np.all(np.isfinite(Sigma)):
        raise NumericError("non-finite shape matrix")

    fx, g = _objective_and_grad(mu, Sigma, x)
    scale = max(1.0, abs(fx))
    B = np.eye(problem.m) * max(np.linalg.norm(g), 1.0)
    radius = 1.0
    first_update = True
    iterations = 0

    while iterations < max_steps:
        pg = x - project_simplex(x - g)
        if np.linalg.norm(pg, np.inf) <= 1e-3:
            break  # hand off to active-set polish
        iterations += 1
        p = _solve_subproblem(g, B, x, radius)
        pred = -(g @ p + 0.5 * p @ B @ p)
        if pred <= 1e-16 * scale:
            radius *= 0.25
            if radius < 1e-14:
                break
            continue
        x_new = x + p
        f_new, g_new = _objective_and_grad(mu, Sigma, x_new)
        ratio = (fx - f_new) / pred
        if ratio >= ACCEPT_RATIO and f_new <= fx:
            s = x_new - x
            y = g_new - g
            sy = float(s @ y)
            if sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
                if first_update:
                    B = np.eye(problem.m) * (float(y @ y) / sy)
                    first_update = False
                Bs = B @ s
                B = B - np.outer(Bs, Bs) / float(s @ Bs) + np.outer(y, y) / sy
            x, fx, g = x_new, f_new, g_new
            if ratio >= GROW_RATIO and np.linalg.norm(p) >= 0.8 * radius:
                radius = min(2.0 * radius, 100.0)
        else:
            radius *= 0.25
            if radius < 1e-14:
                break

    if iterations < max_steps:
        x, used = _polish_active_set(mu, Sigma, x, max_steps - iterations)
        iterations += used
        fx, g = _objective_and_grad(mu, Sigma, x)

    lam, nu = _recover_multipliers(x, g)
    point = KKTPoint(x=x, v=x.copy(), lam=lam, nu=nu, objective=fx,
                     iterations=iterations, converged=False)
    point.converged = kkt_residual(problem, ell, point) <= converge_tol
    return point
