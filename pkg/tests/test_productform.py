#!/usr/bin/env python3
"""
Test suite for the processor-sharing product form on a line.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.errors import ParameterError, StabilityError, UnsupportedTopologyError
from evshare.grid import line_network, synthetic_tree
from evshare.productform import (
    mean_occupancy,
    product_form_table,
    ps_loads,
    stationary_probability,
    top_states,
    total_count_marginal,
    truncation_level,
    validate_against_simulation,
)
from evshare.stochastics import ClassTable, IndependentExp


@pytest.fixture
def line():
    return line_network([0.01, 0.005], voltage_drop_pct=0.1)


@pytest.fixture
def loads(line):
    """rho = (2/19, 3/19)."""
    classes = ClassTable.build(line, [1.0, 1.0], IndependentExp())
    return ps_loads(line, classes)


class TestLoads:
    def test_rho(self, loads):
        assert loads.rho == pytest.approx([2 / 19, 3 / 19])
        assert loads.rho_total == pytest.approx(5 / 19)
        assert loads.stable

    def test_tree_rejected(self):
        net = synthetic_tree(6, seed=0)
        classes = ClassTable.build(net, np.ones(net.node_count), IndependentExp())
        with pytest.raises(UnsupportedTopologyError):
            ps_loads(net, classes)

    def test_unstable(self, line):
        classes = ClassTable.build(line, [10.0, 10.0], IndependentExp())
        loads = ps_loads(line, classes)
        assert not loads.stable
        with pytest.raises(StabilityError):
            stationary_probability(loads, (0, 0))
        with pytest.raises(StabilityError):
            mean_occupancy(loads)


class TestStationaryLaw:
    """Test P(n) = (1 - rho) (sum n)! prod rho_i^n_i / n_i!."""

    def test_empty_state(self, loads):
        assert stationary_probability(loads, (0, 0)) == pytest.approx(14 / 19)

    def test_mixed_state(self, loads):
        """P(1, 1) = (14/19) 2 (2/19)(3/19)."""
        assert stationary_probability(loads, (1, 1)) == pytest.approx(168 / 6859, rel=1e-12)
        assert stationary_probability(loads, (1, 1)) == pytest.approx(0.024493, abs=1e-6)

    def test_bad_state(self, loads):
        with pytest.raises(ParameterError):
            stationary_probability(loads, (1, -1))
        with pytest.raises(ParameterError):
            stationary_probability(loads, (1, 1, 1))

    def test_total_count_geometric(self, loads):
        """Summing over compositions of m gives (1 - rho) rho^m."""
        for m in range(4):
            direct = sum(stationary_probability(loads, (a, m - a)) for a in range(m + 1))
            assert direct == pytest.approx(total_count_marginal(loads, m), rel=1e-12)

    def test_mean_occupancy(self, loads):
        assert mean_occupancy(loads) == pytest.approx([1 / 7, 3 / 14])

    def test_truncation_level(self, loads):
        """(5/19)^14 is the first tail below 1e-8."""
        assert truncation_level(loads) == 13

    def test_table_mass(self, loads):
        table = product_form_table(loads)
        assert sum(table.values()) == pytest.approx(1.0, abs=1e-5)
        assert all(sum(n) <= 13 for n in table)

    def test_top_states(self, loads):
        top = top_states(loads, 3)
        assert top[0][0] == (0, 0)
        assert top[1][0] == (0, 1)
        assert top[0][1] >= top[1][1] >= top[2][1]


class TestValidation:
    @pytest.mark.slow
    def test_insensitive_to_requirement_law(self, line):
        """Exponential and deterministic B with the same mean give the same law."""
        classes = ClassTable.build(line, [1.0, 1.0], IndependentExp())
        check = validate_against_simulation(line, classes, horizon=2e4, seed=3)
        assert set(check.tv) == {"exponential", "deterministic"}
        for kind, tv in check.tv.items():
            assert tv < 0.05, kind


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
