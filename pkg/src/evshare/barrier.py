"""
Log-barrier Newton method for smooth convex programs

    minimize f(x)  subject to  s_i(x) > 0,

where each -log s_i is convex on its domain (linear slacks, or the
determinant of a 2x2 second-order-cone block). The objective may be given
only through its gradient and Hessian; the line search then works on the
directional derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg

from evshare.errors import SolverError
from evshare.log import get_logger

log = get_logger(__name__)

SlackFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, Optional[List[Tuple[int, np.ndarray]]]]]


@dataclass
class BarrierStats:
    outer_iterations: int = 0
    newton_iterations: int = 0
    gap: float = float("inf")
    mu: float = float("nan")


@dataclass
class BarrierResult:
    """Solution with dual estimates nu_i = mu / s_i for every slack."""

    x: np.ndarray
    slacks: np.ndarray
    multipliers: np.ndarray
    stats: BarrierStats
    stationarity: float = float("nan")


class LinearSlacks:
    """Slacks h - G x (constraints G x < h)."""

    def __init__(self, g_mat: np.ndarray, h_vec: np.ndarray):
        self.g_mat = np.atleast_2d(np.asarray(g_mat, float))
        self.h_vec = np.asarray(h_vec, float).ravel()

    def __call__(self, x: np.ndarray):
        return self.h_vec - self.g_mat @ x, -self.g_mat, None


def stack_slacks(*parts: SlackFn) -> SlackFn:
    """Concatenate several slack functions into one."""

    def stacked(x: np.ndarray):
        values, jacobians, curvatures = [], [], []
        offset = 0
        for part in parts:
            s, jac, hess = part(x)
            values.append(s)
            jacobians.append(jac)
            if hess:
                curvatures.extend((offset + i, h) for i, h in hess)
            offset += len(s)
        n = len(x)
        return (
            np.concatenate(values) if values else np.zeros(0),
            np.vstack(jacobians) if jacobians else np.zeros((0, n)),
            curvatures or None,
        )

    return stacked


class BarrierSolver:
    """Barrier method with Newton centering.

    Args:
        gradient: gradient of the convex objective.
        hessian: Hessian of the objective.
        slacks: x -> (s, ds/dx, [(i, d2 s_i/dx2), ...] or None); feasible iff all s > 0.
        objective: objective value; enables an Armijo search. When omitted the
            search bisects on the directional derivative of the barrier function.
        domain: extra domain indicator of the objective (e.g. positivity).
    """

    def __init__(
        self,
        gradient: Callable[[np.ndarray], np.ndarray],
        hessian: Callable[[np.ndarray], np.ndarray],
        slacks: SlackFn,
        *,
        objective: Optional[Callable[[np.ndarray], float]] = None,
        domain: Optional[Callable[[np.ndarray], bool]] = None,
        mu0: float = 1.0,
        mu_factor: float = 0.2,
        newton_tol: float = 1e-10,
        gap_tol: float = 1e-9,
        max_newton: int = 100,
        max_outer: int = 200,
        armijo: Tuple[float, float] = (0.25, 0.5),
    ):
        self.gradient = gradient
        self.hessian = hessian
        self.slacks = slacks
        self.objective = objective
        self.domain = domain or (lambda x: True)
        self.mu0 = mu0
        self.mu_factor = mu_factor
        self.newton_tol = newton_tol
        self.gap_tol = gap_tol
        self.max_newton = max_newton
        self.max_outer = max_outer
        self.armijo = armijo

    def _feasible(self, x: np.ndarray) -> bool:
        if not np.all(np.isfinite(x)) or not self.domain(x):
            return False
        s, _, _ = self.slacks(x)
        return bool(np.all(s > 0))

    def _barrier_value(self, x: np.ndarray, mu: float) -> float:
        s, _, _ = self.slacks(x)
        return float(self.objective(x)) - mu * float(np.sum(np.log(s)))

    def _barrier_gradient(self, x: np.ndarray, mu: float) -> np.ndarray:
        s, jac, _ = self.slacks(x)
        return self.gradient(x) - mu * (jac.T @ (1.0 / s))

    def _barrier_hessian(self, x: np.ndarray, mu: float) -> np.ndarray:
        s, jac, curv = self.slacks(x)
        scaled = jac / s[:, None]
        hess = self.hessian(x) + mu * (scaled.T @ scaled)
        if curv:
            for i, h in curv:
                hess = hess - (mu / s[i]) * h
        return hess

    def _newton_direction(self, x: np.ndarray, mu: float) -> Tuple[np.ndarray, float, np.ndarray]:
        grad = self._barrier_gradient(x, mu)
        hess = self._barrier_hessian(x, mu)
        try:
            factor = scipy.linalg.cho_factor(hess, lower=True, check_finite=False)
            step = -scipy.linalg.cho_solve(factor, grad, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        decrement_sq = float(-(grad @ step))
        return step, decrement_sq, grad

    def _max_feasible_step(self, x: np.ndarray, step: np.ndarray) -> float:
        t = 1.0
        for _ in range(80):
            if self._feasible(x + t * step):
                return t
            t *= 0.5
        raise SolverError("line search could not stay strictly feasible")

    def _armijo_step(self, x: np.ndarray, step: np.ndarray, grad: np.ndarray, mu: float) -> float:
        a, b = self.armijo
        t = self._max_feasible_step(x, step)
        base = self._barrier_value(x, mu)
        slope = float(grad @ step)
        for _ in range(80):
            if self._barrier_value(x + t * step, mu) <= base + a * t * slope:
                return t
            t *= b
        return t

    def _derivative_step(self, x: np.ndarray, step: np.ndarray, decrement_sq: float, mu: float) -> float:
        t = self._max_feasible_step(x, step)

        def slope(tt: float) -> float:
            return float(self._barrier_gradient(x + tt * step, mu) @ step)

        at_t = slope(t)
        if at_t <= 0.1 * decrement_sq:
            return t
        lo, hi = 0.0, t
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            d = slope(mid)
            if abs(d) <= 0.1 * decrement_sq:
                return mid
            if d > 0:
                hi = mid
            else:
                lo = mid
        return lo

    def _center(self, x: np.ndarray, mu: float, stats: BarrierStats) -> np.ndarray:
        for _ in range(self.max_newton):
            step, decrement_sq, grad = self._newton_direction(x, mu)
            if not np.isfinite(decrement_sq):
                raise SolverError("non-finite Newton decrement")
            if decrement_sq / 2.0 <= self.newton_tol:
                break
            if self.objective is not None:
                t = self._armijo_step(x, step, grad, mu)
            else:
                t = self._derivative_step(x, step, decrement_sq, mu)
            stats.newton_iterations += 1
            if t == 0.0:
                break
            x = x + t * step
        else:
            log.debug("barrier.newton_cap", mu=mu, decrement_sq=decrement_sq)
        return x

    def solve(self, x0: np.ndarray) -> BarrierResult:
        x = np.asarray(x0, float).copy()
        if not self._feasible(x):
            raise SolverError("barrier method needs a strictly feasible starting point")
        s, _, _ = self.slacks(x)
        m = max(len(s), 1)
        mu = self.mu0
        stats = BarrierStats()
        for outer in range(1, self.max_outer + 1):
            x = self._center(x, mu, stats)
            stats.outer_iterations = outer
            stats.gap = m * mu
            stats.mu = mu
            if stats.gap < self.gap_tol:
                break
            mu *= self.mu_factor
        else:
            log.warning("barrier.outer_cap", gap=stats.gap)
        x = self._polish(x, mu, stats)
        s, jac, _ = self.slacks(x)
        nu = mu / s
        residual = float(np.max(np.abs(self.gradient(x) - jac.T @ nu), initial=0.0))
        log.debug("barrier.converged", outer=stats.outer_iterations, newton=stats.newton_iterations,
                  gap=stats.gap, stationarity=residual)
        return BarrierResult(x=x, slacks=s, multipliers=nu, stats=stats, stationarity=residual)

    def _polish(self, x: np.ndarray, mu: float, stats: BarrierStats, steps: int = 5) -> np.ndarray:
        """Extra Newton steps at the final mu; quadratic convergence drives the
        centrality residual to round-off so mu / s are accurate multipliers."""
        for _ in range(steps):
            step, decrement_sq, _ = self._newton_direction(x, mu)
            if not np.isfinite(decrement_sq) or decrement_sq <= 1e-24:
                break
            t = self._max_feasible_step(x, step)
            if t < 1.0:
                break
            x = x + step
            stats.newton_iterations += 1
        return x
