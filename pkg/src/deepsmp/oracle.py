"""Deterministic value of log-utility problems with deterministic coefficients.

For log utility the optimal dual initial value is ``1/x0`` and the optimal
dual control is deterministic, so the dual value reduces to

    log x0 + integral_0^T [ r(t) + min_{v in K~} (delta_K(v) + |theta(t) + sigma(t)^-1 v|^2 / 2) ] dt.

The pointwise minimization is a strongly convex quadratic plus a linear term
over an orthant-type domain.  It is solved for all grid points at once by
accelerated projected gradient with the exact Lipschitz step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSet, FloorBox, FullSpace, NonNegOrthant, ZeroPadded
from .market import DeterministicMarkovian


class OracleConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    market: DeterministicMarkovian
    constraint: ConstraintSet
    x0: float = 10.0
    T: float = 0.5
    grid: int = 1000
    tol: float = 1e-12
    max_iter: int = 100_000
    rule: str = "left"

    def __post_init__(self):
        if not isinstance(self.market, DeterministicMarkovian):
            raise TypeError("the oracle needs a deterministic market")
        if self.grid < 1 or self.T <= 0 or self.x0 <= 0:
            raise ValueError("need grid >= 1, T > 0 and x0 > 0")
        if self.rule not in ("left", "midpoint"):
            raise ValueError("rule must be 'left' or 'midpoint'")
        if self.constraint.m != self.market.m:
            raise ValueError("constraint and market dimensions differ")


def project_dual_domain(constraint: ConstraintSet, v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the dual domain (last axis holds coordinates)."""
    if isinstance(constraint, ZeroPadded):
        k = constraint.base.m
        out = np.array(v, dtype=np.float64)
        out[..., :k] = project_dual_domain(constraint.base, out[..., :k])
        return out
    if isinstance(constraint, FullSpace):
        return np.zeros_like(v)
    if isinstance(constraint, (FloorBox, NonNegOrthant)):
        return np.maximum(v, 0.0)
    raise TypeError(f"no dual-domain projection for {type(constraint).__name__}")


def _objective(c, S, theta, v):
    resid = theta + np.einsum("gij,gj->gi", S, v)
    return v @ c + 0.5 * np.einsum("gi,gi->g", resid, resid)


def pointwise_dual_min_batch(
    S: np.ndarray, theta: np.ndarray, constraint: ConstraintSet, tol: float = 1e-12, max_iter: int = 100_000
):
    """Minimize ``c.v + |theta_g + S_g v|^2 / 2`` over the dual domain for every ``g``.

    ``S`` has shape ``(G, m, m)`` (inverse volatilities) and ``theta`` ``(G, m)``.
    Returns ``(v, objective, residual)`` where the residual is the largest
    projected-gradient fixed-point violation ``L |v - P(v - grad / L)|``.
    """
    S = np.asarray(S, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    c = constraint.dual_linear_cost()
    G, m = theta.shape
    L = np.linalg.norm(S, ord=2, axis=(1, 2)) ** 2
    step = (1.0 / L)[:, None]
    StS = np.einsum("gki,gkj->gij", S, S)
    Stt = np.einsum("gki,gk->gi", S, theta)

    def grad(v):
        return c + np.einsum("gij,gj->gi", StS, v) + Stt

    def residual(v):
        return np.max(np.abs(v - project_dual_domain(constraint, v - step * grad(v))) / step, axis=1)

    v = np.zeros((G, m))
    y = v.copy()
    t = 1.0
    for it in range(max_iter):
        v_next = project_dual_domain(constraint, y - step * grad(y))
        # adaptive restart keeps the iteration monotone on ill-conditioned points
        restart = np.einsum("gi,gi->g", y - v_next, v_next - v) > 0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        y = v_next + mom * (v_next - v)
        y[restart] = v_next[restart]
        v = v_next
        t = 1.0 if restart.all() else t_next
        if it % 25 == 0 and residual(v).max() <= tol:
            break
    else:
        res = residual(v).max()
        if res > tol:
            raise OracleConvergenceError(f"projected gradient stalled at residual {res:.3e}")
    return v, _objective(c, S, theta, v), residual(v)


def pointwise_dual_min(coeffs, constraint: ConstraintSet, tol: float = 1e-12, max_iter: int = 100_000):
    """Single-time version; ``coeffs`` carries shared ``sigma_inv`` and ``theta``."""
    v, obj, _ = pointwise_dual_min_batch(
        coeffs.sigma_inv[None], np.asarray(coeffs.theta).reshape(1, -1), constraint, tol, max_iter
    )
    return v[0], float(obj[0])


def grid_times(config: OracleConfig) -> np.ndarray:
    h = config.T / config.grid
    k = np.arange(config.grid)
    return (k + 0.5) * h if config.rule == "midpoint" else k * h


def log_dual_value(config: OracleConfig, return_points: bool = False):
    """Benchmark value; with ``return_points`` also ``(times, v*, pointwise objective)``."""
    times = grid_times(config)
    coeffs = [config.market.coefficients({}, t) for t in times]
    S = np.stack([c.sigma_inv for c in coeffs])
    theta = np.stack([c.theta[0] for c in coeffs])
    r = np.array([c.r[0, 0] for c in coeffs])
    v, obj, _ = pointwise_dual_min_batch(S, theta, config.constraint, config.tol, config.max_iter)
    value = float(np.log(config.x0) + np.sum(r + obj) * (config.T / config.grid))
    if return_points:
        return value, times, v, obj
    return value
