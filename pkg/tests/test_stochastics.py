#!/usr/bin/env python3
"""
Test suite for the joint (B, D) laws and the g-transform.

Closed forms are checked against Monte-Carlo estimates; the largest
sample runs are marked slow.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.errors import ParameterError, RangeError
from evshare.grid import line_network
from evshare.stochastics import (
    EXP1,
    ClassTable,
    DeterministicRatio,
    DiscreteRatio,
    Empirical,
    Independent,
    IndependentExp,
    Law,
    ParetoRatio,
    Utility,
    erlang_b,
    erlang_mean_occupancy,
    expected_occupancy,
    g_derivative,
    g_inverse,
    g_value,
    gamma_effective,
    joint_tail,
)

SAMPLES = 400_000

FAMILIES = [
    IndependentExp(1.0, 1.0),
    IndependentExp(2.0, 0.5),
    Independent(Law("deterministic", 1.0), EXP1),
    Independent(EXP1, Law("deterministic", 2.0)),
    DeterministicRatio(0.02, EXP1),
    DiscreteRatio((0.001, 0.02), (0.1, 0.9), EXP1),
    ParetoRatio(3.0, 2.0, EXP1),
]


def _mc(joint, seed=7, n=SAMPLES):
    return joint.sample(np.random.default_rng(seed), n)


class TestGTransform:
    """Test g(x) = gamma E[min(D x, B)] and its inverse."""

    def test_independent_exp_value(self):
        assert g_value(10.0, IndependentExp(), 1.0) == pytest.approx(5.0)

    def test_deterministic_ratio_value(self):
        assert g_value(0.6, DeterministicRatio(0.02), 1.0) == pytest.approx(0.012)

    def test_g_zero(self):
        for joint in FAMILIES:
            assert g_value(3.0, joint, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_inverse_closed(self):
        """10 x / (1 + x) = 3.8 at x = 0.612903..."""
        assert g_inverse(10.0, IndependentExp(), 3.8) == pytest.approx(0.38 / 0.62, abs=1e-12)
        assert g_inverse(10.0, IndependentExp(), 3.8) == pytest.approx(0.612903, abs=1e-6)

    def test_inverse_pareto(self):
        """E[min(H, 1)] = 5/9 for a = 3, kappa = 2."""
        assert g_inverse(1.0, ParetoRatio(3.0, 2.0), 5.0 / 9.0) == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("joint", FAMILIES, ids=lambda j: type(j).__name__)
    def test_inverse_consistent(self, joint):
        """g(g^-1(lam)) = lam inside the increasing range."""
        gamma = 4.0
        lam = 0.6 * gamma * joint.increasing_top
        x = g_inverse(gamma, joint, lam)
        assert g_value(gamma, joint, x) == pytest.approx(lam, rel=1e-9)

    def test_inverse_discrete_by_root_finding(self):
        """Without a closed inverse the bracketed root still lands on the right rate."""
        joint = DiscreteRatio((0.001, 0.02), (0.1, 0.9))
        x = g_inverse(1.0, joint, 0.01)
        assert 0.001 < x < 0.02
        assert float(joint.expected_min(x)) == pytest.approx(0.01, abs=1e-12)

    def test_inverse_out_of_range(self):
        with pytest.raises(RangeError):
            g_inverse(10.0, IndependentExp(), 10.0)
        with pytest.raises(RangeError):
            g_inverse(1.0, DeterministicRatio(0.02), 0.05)
        with pytest.raises(RangeError):
            g_inverse(0.0, IndependentExp(), 1.0)

    def test_inverse_zero(self):
        assert g_inverse(5.0, IndependentExp(), 0.0) == 0.0

    @pytest.mark.parametrize("joint", FAMILIES, ids=lambda j: type(j).__name__)
    def test_derivative_matches_difference(self, joint):
        x, eps = 0.7 * min(joint.saturation, 1.0), 1e-6
        numeric = (g_value(2.0, joint, x + eps) - g_value(2.0, joint, x - eps)) / (2 * eps)
        assert g_derivative(2.0, joint, x) == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_vectorized(self):
        x = np.array([0.0, 0.5, 1.0, 2.0])
        out = g_value(10.0, IndependentExp(), x)
        assert out.shape == (4,)
        assert out[2] == pytest.approx(5.0)


class TestMonteCarloOracles:
    """Closed forms against sampled (B, D)."""

    @pytest.mark.parametrize("joint", FAMILIES, ids=lambda j: type(j).__name__)
    def test_expected_min(self, joint):
        b, d = _mc(joint)
        for x in (0.01, 0.5, 2.0):
            sample = np.minimum(d * x, b)
            tol = 5 * sample.std() / math.sqrt(len(sample)) + 1e-12
            assert float(joint.expected_min(x)) == pytest.approx(sample.mean(), abs=tol)

    @pytest.mark.parametrize("joint", FAMILIES, ids=lambda j: type(j).__name__)
    def test_success_prob(self, joint):
        b, d = _mc(joint)
        for p in (0.015, 0.6, 3.0):
            hits = (p * d >= b).mean()
            assert float(joint.success_prob(p)) == pytest.approx(hits, abs=0.005)

    @pytest.mark.parametrize("joint", FAMILIES[:6], ids=lambda j: type(j).__name__)
    def test_joint_tail(self, joint):
        b, d = _mc(joint)
        for bt, dt in ((0.0, 0.5), (0.01, 1.0), (1.0, 0.3)):
            freq = ((b > bt) & (d >= dt)).mean()
            assert float(joint_tail(joint, bt, dt)) == pytest.approx(freq, abs=0.005)

    def test_exponential_tail(self):
        """P(B > 1, D >= 1) = e^-2 for unit exponentials."""
        assert float(joint_tail(IndependentExp(), 1.0, 1.0)) == pytest.approx(math.exp(-2.0))

    @pytest.mark.slow
    def test_pareto_joint_tail(self):
        """The quadrature tail of the Pareto ratio law against 4e6 samples."""
        joint = ParetoRatio(3.0, 2.0)
        b, d = _mc(joint, n=4_000_000)
        for bt, dt in ((0.1, 0.2), (1.0, 0.5), (2.0, 1.5)):
            freq = ((b > bt) & (d >= dt)).mean()
            assert float(joint.joint_tail(bt, dt)) == pytest.approx(freq, abs=2e-3)

    @pytest.mark.parametrize("joint", FAMILIES, ids=lambda j: type(j).__name__)
    def test_mean_sojourn(self, joint):
        b, d = _mc(joint)
        p = 0.4
        sample = np.minimum(d, b / p)
        tol = 5 * sample.std() / math.sqrt(len(sample))
        assert joint.mean_sojourn(p) == pytest.approx(sample.mean(), abs=tol)


class TestFamilies:
    """Test construction and edge cases of individual laws."""

    def test_infinite_parking(self):
        """No deadline: the whole requirement is delivered at any positive rate."""
        joint = Independent(EXP1, Law("infinite"))
        assert math.isinf(joint.mean_d)
        assert float(joint.success_prob(0.1)) == 1.0
        assert joint.saturation == 0.0

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            Law("gamma", 1.0)
        with pytest.raises(ParameterError):
            IndependentExp(0.0, 1.0)
        with pytest.raises(ParameterError):
            DiscreteRatio((0.1, 0.2), (0.5, 0.6))
        with pytest.raises(ParameterError):
            ParetoRatio(1.0, 1.0)
        with pytest.raises(ParameterError):
            Independent(Law("infinite"), EXP1)

    def test_pareto_moments(self):
        joint = ParetoRatio(3.0, 2.0)
        assert joint.mean_h == pytest.approx(1.0)
        assert float(joint.h_survival(0.0)) == 1.0

    def test_empirical(self):
        joint = Empirical(np.array([1.0, 2.0, 0.0]), np.array([1.0, 1.0, 2.0]))
        assert joint.mean_b == pytest.approx(1.0)
        assert float(joint.expected_min(1.0)) == pytest.approx((1.0 + 1.0 + 0.0) / 3)
        assert float(joint.success_prob(1.0)) == pytest.approx(2.0 / 3.0)
        assert joint.saturation == pytest.approx(2.0)

    def test_empirical_rejects_mismatch(self):
        with pytest.raises(ParameterError):
            Empirical(np.array([1.0]), np.array([1.0, 2.0]))


class TestUtility:
    def test_log(self):
        u = Utility("log", 2.0)
        assert u.value(1.0) == 0.0
        assert u.derivative(0.5) == pytest.approx(4.0)
        assert u.second_derivative(1.0) == pytest.approx(-2.0)
        assert u.identity_point == 1.0

    def test_power(self):
        u = Utility("power", 1.0, 0.5)
        assert u.value(4.0) == pytest.approx(4.0)
        assert u.derivative(4.0) == pytest.approx(0.5)
        assert u.identity_point == 0.0

    def test_invalid(self):
        with pytest.raises(ParameterError):
            Utility("power", 1.0, 1.0)
        with pytest.raises(ParameterError):
            Utility("log", 0.0)


class TestClassTable:
    """Test the per-class table and effective arrival rates."""

    def test_resistance_weights(self):
        net = line_network([0.01, 0.005])
        classes = ClassTable.build(net, [12.0, 12.0], IndependentExp(), weighting="resistance")
        assert classes.weights[:, 0] == pytest.approx([0.01, 0.015])
        assert classes.node_count == 2
        assert classes.type_count == 1

    def test_shape_mismatch(self):
        net = line_network([0.01, 0.005])
        with pytest.raises(ParameterError):
            ClassTable.build(net, [1.0, 2.0, 3.0], IndependentExp())

    def test_gamma_two_types_one_space(self):
        """lambda = (0.48, 0.72) with K = 1 admits gamma = (0.4, 0.6)."""
        net = line_network([0.01], k_spaces=1)
        classes = ClassTable.build(net, np.array([[0.48, 0.72]]), [IndependentExp(), IndependentExp()])
        assert gamma_effective(net, classes)[0] == pytest.approx([0.4, 0.6])

    def test_gamma_clamped_at_spaces(self):
        """lambda = 12 with K = 10 and E[D] = 1 gives gamma = 10."""
        net = line_network([0.01, 0.005], k_spaces=10)
        classes = ClassTable.build(net, [12.0, 12.0], IndependentExp())
        assert gamma_effective(net, classes)[:, 0] == pytest.approx([10.0, 10.0])

    def test_gamma_unlimited(self):
        net = line_network([0.01, 0.005])
        classes = ClassTable.build(net, [12.0, 3.0], IndependentExp())
        assert gamma_effective(net, classes)[:, 0] == pytest.approx([12.0, 3.0])


class TestErlang:
    def test_blocking(self):
        assert erlang_b(2, 1.0) == pytest.approx(0.2)
        assert erlang_b(math.inf, 5.0) == 0.0
        assert erlang_b(3, 0.0) == 0.0

    def test_occupancy(self):
        """K = 2 with offered load 1 holds 0.8 EVs on average."""
        assert erlang_mean_occupancy(2, 1.0) == pytest.approx(0.8)

    def test_expected_occupancy_unlimited(self):
        """With K = inf the occupancy is lambda E[D]."""
        net = line_network([0.01])
        classes = ClassTable.build(net, [1.0], IndependentExp(1.0, 1.0))
        assert expected_occupancy(net, classes)[0, 0] == pytest.approx(1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
