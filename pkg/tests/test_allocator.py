#!/usr/bin/env python3
"""
Test suite for the instantaneous power allocation.

Covers:
- The proportional-fairness closed form on a line
- The Distflow barrier solver, caps and multipliers
- The relaxed AC solver and its exactness gap
- The balance property and the cached Allocator facade
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.allocator import (
    Allocator,
    StateZ,
    allocate_ac,
    allocate_distflow,
    balance_check,
    closed_form_rates,
    fairness_closed_form,
)
from evshare.errors import ParameterError, UnsupportedSettingError, UnsupportedTopologyError
from evshare.grid import line_network, synthetic_tree
from evshare.loadflow import ac_solve, distflow_voltages
from evshare.stochastics import ClassTable, IndependentExp

P_EQUAL = 0.095 / 0.155


@pytest.fixture
def line():
    return line_network([0.01, 0.005], voltage_drop_pct=0.1)


@pytest.fixture
def fair_classes(line):
    return ClassTable.build(line, [12.0, 12.0], IndependentExp(), weighting="resistance")


class TestClosedForm:
    """Test weighted proportional fairness on a line."""

    def test_equal_rates(self, line, fair_classes):
        """w = R and z = (6.2, 6.2) give p = 0.095 / 0.155 everywhere."""
        alloc = fairness_closed_form(line, fair_classes, [6.2, 6.2])
        assert alloc.p[:, 0] == pytest.approx([P_EQUAL, P_EQUAL], abs=1e-12)
        assert P_EQUAL == pytest.approx(0.612903, abs=1e-6)
        assert alloc.kkt_residual < 1e-9

    def test_deepest_constraint_tight(self, line, fair_classes):
        """The deepest node sits exactly at its lower voltage bound."""
        alloc = fairness_closed_form(line, fair_classes, [6.2, 6.2])
        assert alloc.voltages[2] == pytest.approx(line.v_lo[2], abs=1e-12)
        assert alloc.h2[1] > 0
        assert alloc.h2[0] == 0

    def test_empty_state(self, line, fair_classes):
        alloc = fairness_closed_form(line, fair_classes, [0.0, 0.0])
        assert np.all(alloc.p == 0)
        assert alloc.voltages == pytest.approx([1.0, 1.0, 1.0])

    def test_tree_rejected(self):
        net = synthetic_tree(6, seed=0)
        classes = ClassTable.build(net, np.ones(net.node_count), IndependentExp())
        with pytest.raises(UnsupportedTopologyError):
            fairness_closed_form(net, classes, np.ones(net.node_count))

    def test_caps_rejected(self, line):
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp(), c_max=1.0)
        with pytest.raises(UnsupportedSettingError):
            fairness_closed_form(line, classes, [1.0, 1.0])

    def test_stacked_states(self, line, fair_classes):
        stack = np.array([[[6.2], [6.2]], [[1.0], [0.0]]])
        p = closed_form_rates(line, fair_classes, stack)
        assert p[0, :, 0] == pytest.approx([P_EQUAL, P_EQUAL])
        assert p[1, 1, 0] == 0.0
        assert p[1, 0, 0] == pytest.approx(0.095 / 0.01)


class TestDistflowAllocation:
    """Test the barrier solver under linearized voltage constraints."""

    def test_matches_closed_form(self, line, fair_classes):
        alloc = allocate_distflow(line, fair_classes, [6.2, 6.2])
        assert alloc.p[:, 0] == pytest.approx([P_EQUAL, P_EQUAL], abs=1e-6)
        assert alloc.model == "distflow"

    def test_voltage_multiplier_on_deepest_node(self, line, fair_classes):
        alloc = allocate_distflow(line, fair_classes, [6.2, 6.2])
        closed = fairness_closed_form(line, fair_classes, [6.2, 6.2])
        assert alloc.h2[1] == pytest.approx(closed.h2[1], rel=1e-4)
        assert alloc.h2[0] == pytest.approx(0.0, abs=1e-4)

    def test_node_caps_bind(self):
        """With M = 1 each node draws exactly its cap."""
        net = line_network([0.01, 0.005], voltage_drop_pct=0.1, m_cap=1.0)
        classes = ClassTable.build(net, [1.0, 1.0], IndependentExp())
        alloc = allocate_distflow(net, classes, [6.2, 6.2])
        assert alloc.node_lam == pytest.approx([1.0, 1.0], abs=1e-6)
        assert np.all(alloc.h3[:, 0] > 0)

    def test_rate_caps_bind(self, line):
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp(), c_max=0.1)
        alloc = allocate_distflow(line, classes, [6.2, 6.2])
        assert alloc.p[:, 0] == pytest.approx([0.1, 0.1], abs=1e-6)
        assert np.all(alloc.h4[:, 0] > 0)

    def test_feasible_on_tree(self):
        net = synthetic_tree(15, seed=2)
        classes = ClassTable.build(net, np.ones(net.node_count), IndependentExp(), weighting="resistance")
        z = np.arange(net.node_count) % 3
        alloc = allocate_distflow(net, classes, z)
        w = distflow_voltages(net, alloc.lam)
        assert np.all(w[1:] >= net.v_lo[1:] - 1e-9)
        assert np.all(alloc.p[z == 0] == 0)
        assert np.all(alloc.p[z > 0] > 0)

    def test_zero_headroom_blocks(self):
        """v_lo = w00 leaves nothing to allocate."""
        net = line_network([0.01, 0.005], v_lo=1.0)
        classes = ClassTable.build(net, [1.0, 1.0], IndependentExp())
        alloc = allocate_distflow(net, classes, [2.0, 3.0])
        assert np.all(alloc.p == 0)

    def test_negative_state(self, line, fair_classes):
        with pytest.raises(ParameterError):
            allocate_distflow(line, fair_classes, [-1.0, 2.0])


class TestAcAllocation:
    """Test the relaxed branch-flow program."""

    def test_single_edge_voltage_limit(self):
        """One class at a single edge charges until the AC voltage reaches 0.81."""
        net = line_network([0.01], [0.01], voltage_drop_pct=0.1)
        classes = ClassTable.build(net, [1.0], IndependentExp())
        alloc = allocate_ac(net, classes, [6.2])
        # V = 0.9 solves V (1 - V) = 0.01 lam
        assert alloc.lam[0, 0] == pytest.approx(9.0, rel=1e-4)
        physical = ac_solve(net, alloc.lam)
        assert physical.w[1] == pytest.approx(0.81, abs=1e-5)
        assert alloc.exactness_gap < 1e-6

    def test_ac_utility_below_distflow(self, line):
        """Every AC-feasible allocation is Distflow-feasible, so AC cannot do better."""
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp())
        z = np.array([[3.0], [3.0]])
        ac = allocate_ac(line, classes, z)
        lin = allocate_distflow(line, classes, z)
        assert float(np.sum(z * np.log(ac.p))) <= float(np.sum(z * np.log(lin.p))) + 1e-6
        assert np.all(ac_solve(line, ac.lam).w[1:] >= line.v_lo[1:] - 1e-8)
        assert ac.model == "ac"


class TestBalance:
    """Test p_i(z + e_k) p_k(z) = p_i(z) p_k(z + e_i)."""

    def test_equal_weights_balanced(self, line):
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp())
        report = balance_check(line, classes, samples=40)
        assert report.ok
        assert report.checked == 40 * 4

    def test_unequal_weights_unbalanced(self, line, fair_classes):
        report = balance_check(line, fair_classes, states=[(1, 1), (2, 0)])
        assert not report.ok

    def test_custom_rate_function(self, line):
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp())

        def equal_share(z):
            return np.full(len(z), 1.0 / max(z.sum(), 1.0))

        assert balance_check(line, classes, states=[(1, 2), (0, 3)], rate_fn=equal_share).ok


class TestDistflowProperties:
    """Properties of the Distflow allocation over random instances."""

    def test_fewer_evs_never_slow_anyone_down(self):
        """0 < y <= z gives p(y) >= p(z) on random two-type lines."""
        rng = np.random.default_rng(21)
        for _ in range(50):
            nodes = int(rng.integers(2, 7))
            net = line_network(rng.uniform(0.002, 0.02, nodes), voltage_drop_pct=0.1)
            weights = rng.uniform(0.5, 2.0, (nodes, 2))
            classes = ClassTable.build(net, np.ones((nodes, 2)), [IndependentExp(), IndependentExp()],
                                       weighting=weights)
            z = rng.integers(1, 7, (nodes, 2)).astype(float)
            shrink = rng.random((nodes, 2)) < 0.5
            shrink.flat[rng.integers(z.size)] = True
            y = np.where(shrink, z * rng.uniform(0.2, 0.8, z.shape), z)
            p_z = allocate_distflow(net, classes, z).p
            p_y = allocate_distflow(net, classes, y).p
            assert np.all(p_y >= p_z - 1e-8), (p_y - p_z).min()

    def test_common_weight_factor_irrelevant(self):
        """Multiplying every weight by one constant leaves the rates unchanged."""
        rng = np.random.default_rng(4)
        for seed in range(5):
            net = synthetic_tree(8, seed=seed)
            weights = rng.uniform(0.5, 2.0, (net.node_count, 1))
            classes = ClassTable.build(net, np.ones(net.node_count), IndependentExp(), weighting=weights)
            z = rng.integers(1, 5, net.node_count).astype(float)
            base = allocate_distflow(net, classes, z).p
            scaled = allocate_distflow(net, classes.with_weights(37.5 * weights), z).p
            assert scaled == pytest.approx(base, abs=1e-9)


class TestAllocatorFacade:
    """Test model selection and caching."""

    def test_cache_hits(self, line, fair_classes):
        allocator = Allocator(line, fair_classes, "closed-form")
        first = allocator([6.2, 6.2])
        second = allocator(np.array([[6.2], [6.2]]))
        assert first is second
        assert allocator.cache_info().hits == 1

    def test_state_object(self, line, fair_classes):
        allocator = Allocator(line, fair_classes, "distflow")
        alloc = allocator(StateZ([[6.2], [6.2]], q=[[8.0], [7.0]]))
        assert alloc.p[:, 0] == pytest.approx([P_EQUAL, P_EQUAL], abs=1e-6)

    def test_allocate_many(self, line, fair_classes):
        allocator = Allocator(line, fair_classes, "distflow", jobs=2)
        stack = np.array([[[6.2], [6.2]], [[1.0], [2.0]]])
        rates = allocator.allocate_many(stack)
        assert rates.shape == (2, 2, 1)
        assert rates[0, :, 0] == pytest.approx([P_EQUAL, P_EQUAL], abs=1e-6)

    def test_unknown_model(self, line, fair_classes):
        with pytest.raises(ParameterError):
            Allocator(line, fair_classes, "dc")

    def test_state_exceeding_q(self):
        with pytest.raises(ParameterError):
            StateZ([[2.0]], q=[[1.0]])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
