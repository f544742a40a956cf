#!/usr/bin/env python3
"""
Test suite for the named case-study presets.
"""

import sys
from pathlib import Path

import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.errors import ConfigError
from evshare.scenarios import (
    SCENARIOS,
    packaged_networks,
    preset_config,
    run_discrete_ratio,
    run_markov_sweep,
    run_scenario,
    run_two_type,
)


@pytest.fixture
def small_network():
    return packaged_networks() / "two_node_line.csv"


class TestPresets:
    def test_names(self):
        assert sorted(SCENARIOS) == ["case-discrete-ratio", "case-markov-sweep", "case-two-type"]

    def test_default_feeder(self):
        net, classes = preset_config("case-two-type").build()
        assert net.node_count == 46
        assert classes.type_count == 2
        assert classes.lam[0] == pytest.approx([0.48, 0.72])

    def test_unknown(self):
        with pytest.raises(ConfigError):
            preset_config("case-unknown")
        with pytest.raises(ConfigError):
            run_scenario("case-unknown")

    def test_closed_form_refused(self, small_network):
        with pytest.raises(ConfigError):
            run_scenario("case-two-type", small_network, "closed-form")


class TestRuns:
    """Presets on the packaged two-node line."""

    def test_two_type_rates_reach_ratio(self, small_network):
        """With ample headroom every class is charged at least at its ratio theta."""
        frame = run_two_type(small_network)["case_two_type.csv"]
        assert len(frame) == 4
        assert (frame["p_over_theta"] >= 1.0 - 1e-6).all()

    def test_discrete_ratio(self, small_network):
        frames = run_discrete_ratio(small_network)
        success = frames["case_discrete_ratio_success.csv"]["agg_success"][0]
        assert 0.0 < success <= 1.0
        assert list(frames["case_discrete_ratio.csv"]["node"]) == [1, 2]

    @pytest.mark.slow
    def test_markov_sweep_monotone_in_lambda(self, small_network):
        """More arrivals at the same departure rate cannot raise the success fraction."""
        frames = run_markov_sweep(small_network, lambdas=(10.0, 30.0, 50.0), dep_rates=(1.0,))
        sweep = frames["case_markov_sweep.csv"]
        assert sweep["agg_success"].is_monotonic_decreasing
        assert frames["case_markov_nodes.csv"] is not None


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
