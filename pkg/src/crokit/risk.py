"""Empirical conditional value-at-risk and its subgradient.

``cvar(y, alpha)`` equals the maximum of ``w . y`` over the capped
probability simplex ``{w >= 0, sum w = 1, w <= 1/((1-alpha) M)}`` — the
expected value of the right tail.  ``alpha = 0`` recovers the mean; the
worst-case cost is exposed through the ``max`` risk kind.  The subgradient
returns the maximizing weights; when the quantile boundary is tied the
residual cap weight is split equally among the tied entries so gradients
are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError

Array = np.ndarray


def _cvar_weights(costs: Array, alpha: float) -> Array:
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 1 or costs.size == 0:
        raise InputError("cost batch must be a nonempty vector")
    if not 0.0 <= alpha < 1.0:
        raise InputError("risk level must lie in [0, 1)")
    M = costs.size
    cap = 1.0 / ((1.0 - alpha) * M)
    k_full = int(np.floor((1.0 - alpha) * M))
    order = np.argsort(-costs, kind="stable")
    w = np.zeros(M)
    if k_full >= M:
        w[:] = cap  # alpha = 0: cap = 1/M, every entry saturated
        return w
    boundary = costs[order[k_full]]
    above = costs > boundary
    w[above] = cap
    residual = 1.0 - cap * np.count_nonzero(above)
    tied = costs == boundary
    w[tied] = residual / np.count_nonzero(tied)
    return w


def cvar(costs: Array, alpha: float) -> float:
    """Empirical CVaR at level alpha (mean of the worst (1-alpha) tail)."""
    w = _cvar_weights(costs, alpha)
    return float(w @ np.asarray(costs, dtype=float))


def cvar_subgradient(costs: Array, alpha: float) -> Array:
    """Maximizing weights of the CVaR linear program; sums to 1, capped."""
    return _cvar_weights(costs, alpha)


@dataclass(frozen=True)
class RiskSpec:
    """Risk functional selector: cvar at a level, the mean, or the maximum."""

    alpha: float = 0.9
    kind: str = "cvar"

    def __post_init__(self):
        if self.kind not in ("cvar", "mean", "max"):
            raise InputError(f"unknown risk kind {self.kind!r}")
        if self.kind == "cvar" and not 0.0 <= self.alpha < 1.0:
            raise InputError("risk level must lie in [0, 1)")

    def evaluate(self, costs: Array) -> float:
        return float(self.weights(costs) @ np.asarray(costs, dtype=float))

    def weights(self, costs: Array) -> Array:
        costs = np.asarray(costs, dtype=float)
        if self.kind == "mean":
            return _cvar_weights(costs, 0.0)
        if self.kind == "max":
            if costs.size == 0:
                raise InputError("cost batch must be a nonempty vector")
            top = costs == costs.max()
            w = np.zeros(costs.size)
            w[top] = 1.0 / np.count_nonzero(top)
            return w
        return _cvar_weights(costs, self.alpha)
