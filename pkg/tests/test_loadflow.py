#!/usr/bin/env python3
"""
Test suite for the load-flow models.

Covers:
- Linearized Distflow voltages
- The AC backward/forward sweep, its conservation laws and infeasibility
- Domination of AC voltages by Distflow
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.errors import DominationError, InfeasibleLoadError, ParameterError
from evshare.grid import line_network, synthetic_tree
from evshare.loadflow import ac_solve, ac_sweep, check_domination, distflow_voltages, voltage_violations


@pytest.fixture
def two_node():
    return line_network([0.01, 0.005], voltage_drop_pct=0.1)


@pytest.fixture
def single_edge():
    return line_network([0.01], [0.01], voltage_drop_pct=0.1)


class TestDistflow:
    """Test the linearized voltages."""

    def test_two_node_values(self, two_node):
        """Loads (3, 2) give w = (0.9, 0.88)."""
        w = distflow_voltages(two_node, [3.0, 2.0])
        assert w[0] == 1.0
        assert w[1:] == pytest.approx([0.9, 0.88])

    def test_single_load(self, two_node):
        """A load of 3.8 at node 1 only lowers node 2 as much as node 1."""
        w = distflow_voltages(two_node, [3.8, 0.0])
        assert w[1] == pytest.approx(0.924)
        assert w[2] == pytest.approx(0.924)

    def test_per_class_matrix(self, two_node):
        """An (I, J) matrix is summed over types."""
        w = distflow_voltages(two_node, np.array([[1.0, 2.0], [0.5, 1.5]]))
        assert w[1:] == pytest.approx([0.9, 0.88])

    def test_zero_load(self, two_node):
        """No load keeps every node at w00."""
        assert distflow_voltages(two_node, [0.0, 0.0]) == pytest.approx([1.0, 1.0, 1.0])

    def test_bad_shape(self, two_node):
        with pytest.raises(ParameterError):
            distflow_voltages(two_node, [1.0, 2.0, 3.0])

    def test_negative_load(self, two_node):
        with pytest.raises(ParameterError):
            distflow_voltages(two_node, [-1.0, 0.0])

    def test_violations(self, two_node):
        """Nodes below v_lo are reported 1-based."""
        w = distflow_voltages(two_node, [0.0, 8.0])
        assert voltage_violations(two_node, w) == (2,)


class TestAcSweep:
    """Test the simplified AC equations."""

    def test_single_edge_closed_form(self, single_edge):
        """A leaf solves V^2 - V + 0.038 = 0 on the high branch."""
        sol = ac_solve(single_edge, [3.8])
        expected = (1.0 + math.sqrt(1.0 - 4.0 * 0.038)) / 2.0
        assert sol.converged
        assert sol.v[1] == pytest.approx(expected, abs=1e-9)
        assert sol.v[1] == pytest.approx(0.9604347, abs=1e-7)
        assert sol.w[1] == pytest.approx(0.9224347, abs=2e-7)

    def test_domination_gap(self, single_edge):
        """The Distflow surplus at node 1 is about 0.0015653."""
        report = check_domination(single_edge, [3.8])
        assert report.ok
        assert report.gaps[1] == pytest.approx(0.0015653, abs=2e-7)

    def test_edge_residuals(self, two_node):
        """Every edge equation holds at the fixed point."""
        sol = ac_solve(two_node, [2.0, 1.5])
        assert np.max(np.abs(sol.residuals())) < 1e-8

    def test_energy_balance(self):
        """Feeder injection equals loads plus line losses."""
        net = synthetic_tree(12, seed=1)
        load = np.linspace(0.1, 0.5, net.node_count)
        sol = ac_solve(net, load)
        assert sol.converged
        assert abs(sol.energy_balance_residual) < 1e-8
        assert np.all(sol.loss_p[1:] >= 0)

    def test_physical_point_on_cone(self, two_node):
        """Without a virtual drop the rank condition w_pp w_kk = w_pk^2 is exact."""
        sol = ac_solve(two_node, [2.0, 1.5])
        assert np.max(np.abs(sol.psd_margin)) < 1e-12

    def test_virtual_drop_interior(self, two_node):
        """A positive virtual drop yields a strictly interior cone point."""
        sol = ac_sweep(two_node, [2.0, 1.5], virtual_drop=1e-4)
        assert np.all(sol.psd_margin[1:] > 0)

    def test_infeasible_load(self, single_edge):
        """Too much load has no real voltage solution."""
        with pytest.raises(InfeasibleLoadError):
            ac_solve(single_edge, [30.0])

    def test_no_load(self, two_node):
        sol = ac_solve(two_node, [0.0, 0.0])
        assert sol.w == pytest.approx([1.0, 1.0, 1.0])
        assert sol.loss_p == pytest.approx([0.0, 0.0, 0.0])


class TestDomination:
    """Test that linearized voltages sit above the AC voltages."""

    def test_tree_dominates(self):
        """Distflow dominates AC on a feeder tree at moderate load."""
        net = synthetic_tree(20, seed=4)
        load = np.full(net.node_count, 0.3)
        report = check_domination(net, load)
        assert report.ok
        assert np.all(report.gaps[1:] >= -1e-12)
        report.raise_for_violations()

    def test_voltage_falls_towards_leaves(self):
        """Under pure consumption w never rises from a node to its child, in either model."""
        rng = np.random.default_rng(8)
        for seed in range(20):
            net = synthetic_tree(int(rng.integers(4, 12)), seed=seed)
            load = rng.uniform(0.0, 0.4, net.node_count)
            parents = net.parent[1:]
            for w in (distflow_voltages(net, load), ac_solve(net, load).w):
                assert np.all(w[1:] <= w[parents] + 1e-12)

    def test_violation_raises(self, single_edge):
        """A report with violations raises DominationError naming the nodes."""
        report = check_domination(single_edge, [3.8])
        broken = type(report)(report.w_lin, report.w_ac, report.gaps, (1,))
        with pytest.raises(DominationError) as err:
            broken.raise_for_violations()
        assert err.value.nodes == (1,)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
