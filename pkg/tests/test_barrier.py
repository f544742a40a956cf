#!/usr/bin/env python3
"""
Test suite for the log-barrier Newton solver.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.barrier import BarrierSolver, LinearSlacks, stack_slacks
from evshare.errors import SolverError


def _quadratic(target):
    target = np.asarray(target, float)
    return (
        lambda x: 2.0 * (x - target),
        lambda x: 2.0 * np.eye(len(x)),
        lambda x: float(np.sum((x - target) ** 2)),
    )


class TestBarrierSolver:
    """Test the barrier method on small programs with known optima."""

    def test_active_bound(self):
        """min (x-2)^2 s.t. x < 1 ends at x = 1 with multiplier 2."""
        grad, hess, obj = _quadratic([2.0])
        solver = BarrierSolver(grad, hess, LinearSlacks([[1.0]], [1.0]), objective=obj)
        result = solver.solve(np.array([0.0]))
        assert result.x[0] == pytest.approx(1.0, abs=1e-7)
        assert result.multipliers[0] == pytest.approx(2.0, rel=1e-5)
        assert result.stationarity < 1e-6

    def test_inactive_bound(self):
        """An interior optimum leaves the multiplier near zero."""
        grad, hess, obj = _quadratic([0.5])
        solver = BarrierSolver(grad, hess, LinearSlacks([[1.0]], [1.0]), objective=obj)
        result = solver.solve(np.array([0.0]))
        assert result.x[0] == pytest.approx(0.5, abs=1e-7)
        assert result.multipliers[0] < 1e-6

    def test_derivative_line_search(self):
        """Without an objective value the search works on the directional derivative."""
        grad, hess, _ = _quadratic([2.0, 2.0])
        slacks = LinearSlacks([[1.0, 1.0]], [2.0])
        result = BarrierSolver(grad, hess, slacks).solve(np.array([0.1, 0.2]))
        assert result.x == pytest.approx([1.0, 1.0], abs=1e-6)
        assert result.multipliers[0] == pytest.approx(2.0, rel=1e-4)

    def test_log_objective(self):
        """Proportional fairness on a simplex: max sum w log x s.t. sum x < 1 gives x = w / sum w."""
        w = np.array([1.0, 2.0, 3.0])
        solver = BarrierSolver(
            gradient=lambda x: -w / x,
            hessian=lambda x: np.diag(w / x ** 2),
            slacks=LinearSlacks(np.ones((1, 3)), [1.0]),
            objective=lambda x: -float(w @ np.log(x)),
            domain=lambda x: bool(np.all(x > 0)),
        )
        result = solver.solve(np.full(3, 0.1))
        assert result.x == pytest.approx(w / w.sum(), abs=1e-7)
        assert result.multipliers[0] == pytest.approx(w.sum(), rel=1e-5)

    def test_infeasible_start(self):
        """The starting point must be strictly feasible."""
        grad, hess, obj = _quadratic([2.0])
        solver = BarrierSolver(grad, hess, LinearSlacks([[1.0]], [1.0]), objective=obj)
        with pytest.raises(SolverError):
            solver.solve(np.array([1.0]))

    def test_stacked_slacks(self):
        """Two stacked blocks behave like one box constraint."""
        grad, hess, obj = _quadratic([5.0, -5.0])
        upper = LinearSlacks(np.eye(2), [1.0, 1.0])
        lower = LinearSlacks(-np.eye(2), [1.0, 1.0])
        result = BarrierSolver(grad, hess, stack_slacks(upper, lower), objective=obj).solve(np.zeros(2))
        assert result.x == pytest.approx([1.0, -1.0], abs=1e-7)
        assert len(result.multipliers) == 4
        assert result.multipliers[0] == pytest.approx(8.0, rel=1e-5)
        assert result.multipliers[3] == pytest.approx(8.0, rel=1e-5)

    def test_curved_slack(self):
        """A disc constraint 1 - x'x > 0 through its second derivative."""
        def disc(x):
            return np.array([1.0 - x @ x]), -2.0 * x[None, :], [(0, -2.0 * np.eye(2))]

        grad, hess, obj = _quadratic([3.0, 4.0])
        result = BarrierSolver(grad, hess, disc, objective=obj).solve(np.zeros(2))
        assert result.x == pytest.approx([0.6, 0.8], abs=1e-6)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
