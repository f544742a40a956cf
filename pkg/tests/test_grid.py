#!/usr/bin/env python3
"""
Test suite for the radial network model.

Covers:
- CSV ingestion, its error reporting and bus exclusion
- Path and subtree tables
- Voltage headroom and the write/load round trip
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.errors import NetworkFormatError, ParameterError, TopologyError
from evshare.grid import Network, delta, line_network, load_network, synthetic_tree, write_network

TEMPLATES = Path(__file__).parent.parent / "src" / "evshare" / "templates" / "networks"


def _write(tmp_path, body, name="net.csv"):
    path = tmp_path / name
    path.write_text("node,parent,r_pu,x_pu,k_spaces,m_cap\n" + body)
    return path


class TestLoadNetwork:
    """Test CSV ingestion."""

    def test_two_node_line(self):
        """The packaged two-node line has cumulative resistances 0.01 and 0.015."""
        net = load_network(TEMPLATES / "two_node_line.csv", voltage_drop_pct=0.1)
        assert net.node_count == 2
        assert net.cum_r[1:] == pytest.approx([0.01, 0.015])
        assert net.is_line
        assert net.k_spaces[1:].tolist() == [10.0, 10.0]
        assert math.isinf(net.m_cap[2])

    def test_single_node(self, tmp_path):
        """A one-row file gives one node with a one-edge path."""
        net = load_network(_write(tmp_path, "1,0,0.02,0.01,inf,inf\n"))
        assert net.node_count == 1
        assert net.paths.path_edges[1] == ((0, 1),)
        assert net.paths.subtree_nodes[1] == frozenset({1})

    def test_self_parent_is_cycle(self, tmp_path):
        """A node that is its own parent is reported as a cycle."""
        path = _write(tmp_path, "1,0,0.01,0.01,1,1\n2,2,0.01,0.01,1,1\n")
        with pytest.raises(TopologyError) as err:
            load_network(path)
        assert err.value.nodes == (2,)

    def test_longer_cycle_detected(self, tmp_path):
        """Nodes that never reach the root are rejected."""
        path = _write(tmp_path, "1,0,0.01,0.01,1,1\n2,3,0.01,0.01,1,1\n3,2,0.01,0.01,1,1\n")
        with pytest.raises(TopologyError):
            load_network(path)

    def test_parse_error_carries_line(self, tmp_path):
        """Unparseable fields name the offending line."""
        path = _write(tmp_path, "1,0,0.01,0.01,1,1\n2,1,abc,0.01,1,1\n")
        with pytest.raises(NetworkFormatError) as err:
            load_network(path)
        assert err.value.line == 3

    def test_nonpositive_resistance(self, tmp_path):
        """Zero resistance is a parameter error."""
        with pytest.raises(ParameterError):
            load_network(_write(tmp_path, "1,0,0,0.01,1,1\n"))

    def test_wrong_header(self, tmp_path):
        """The header must match the schema exactly."""
        path = tmp_path / "bad.csv"
        path.write_text("id,parent,r,x,k,m\n1,0,0.01,0.01,1,1\n")
        with pytest.raises(NetworkFormatError):
            load_network(path)

    def test_missing_file(self, tmp_path):
        """A missing file is a format error, not an OSError."""
        with pytest.raises(NetworkFormatError):
            load_network(tmp_path / "absent.csv")

    def test_comments_skipped(self, tmp_path):
        """Lines starting with # are ignored."""
        path = tmp_path / "c.csv"
        path.write_text("# feeder\nnode,parent,r_pu,x_pu,k_spaces,m_cap\n# bus 1\n1,0,0.01,0.01,1,1\n")
        assert load_network(path).node_count == 1

    def test_exclusion_reattaches_children(self, tmp_path):
        """Removing a bus joins its children to its parent with impedances added."""
        path = _write(tmp_path, "1,0,0.01,0.02,1,1\n2,1,0.03,0.04,1,1\n3,2,0.005,0.006,1,1\n")
        net = load_network(path, exclude=[2])
        assert net.node_count == 2
        assert net.labels == (0, 1, 3)
        assert net.parent[2] == 1
        assert net.r[2] == pytest.approx(0.035)
        assert net.x[2] == pytest.approx(0.046)
        assert net.cum_r[2] == pytest.approx(0.045)

    def test_relabelled_in_file_order(self, tmp_path):
        """Rows keep their file position as index, even a child listed before its parent."""
        path = _write(tmp_path, "7,4,0.02,0.0,1,1\n4,0,0.01,0.0,1,1\n9,4,0.03,0.0,1,1\n")
        net = load_network(path)
        assert net.labels == (0, 7, 4, 9)
        assert net.parent.tolist() == [-1, 2, 0, 2]
        assert net.cum_r.tolist() == pytest.approx([0.0, 0.03, 0.01, 0.04])


class TestPathTables:
    """Test path and subtree queries."""

    def setup_method(self):
        """Tree 0 - 1 - {2, 3}, 3 - 4."""
        parent = np.array([-1, 0, 1, 1, 3])
        size = len(parent)
        self.net = Network(
            parent=parent,
            r=np.array([0.0, 0.01, 0.02, 0.03, 0.04]),
            x=np.array([0.0, 0.01, 0.02, 0.03, 0.04]),
            w00=1.0,
            v_lo=np.full(size, 0.81),
            v_hi=np.full(size, 1.21),
            k_spaces=np.concatenate([[0.0], np.full(size - 1, 5.0)]),
            m_cap=np.full(size, np.inf),
        )

    def test_cumulative_resistance(self):
        """cum_r[k] = cum_r[parent] + r[k]."""
        net = self.net
        for k in net.nodes:
            assert net.cum_r[k] == pytest.approx(net.cum_r[net.parent[k]] + net.r[k])
        assert net.cum_r[4] == pytest.approx(0.08)

    def test_subtrees(self):
        """Subtree of the root is everything, leaves are singletons."""
        subtree = self.net.paths.subtree_nodes
        assert subtree[0] == frozenset({1, 2, 3, 4})
        assert subtree[3] == frozenset({3, 4})
        assert subtree[2] == frozenset({2})

    def test_not_a_line(self):
        """A branching node makes the network a tree."""
        assert not self.net.is_line

    def test_sensitivity_common_ancestor(self):
        """A[k, m] is the path resistance of the deepest common ancestor."""
        a = self.net.sensitivity
        assert a[1, 3] == pytest.approx(0.01)  # nodes 2 and 4 meet at node 1
        assert a[2, 3] == pytest.approx(0.04)  # nodes 3 and 4 meet at node 3
        assert a[3, 3] == pytest.approx(0.08)
        assert np.allclose(a, a.T)


class TestDelta:
    """Test voltage headroom."""

    def test_ten_percent_drop_headroom(self):
        """w00 = 1 and v_lo = 0.81 give delta = 0.095."""
        net = line_network([0.01, 0.005], v_lo=0.81)
        assert delta(net, 1) == pytest.approx(0.095)

    def test_zero_headroom(self):
        """v_lo = w00 gives zero headroom."""
        net = line_network([0.01], v_lo=1.0)
        assert delta(net, 1) == 0.0

    def test_squared_bound(self):
        """v_lo = 0.9801 gives 0.00995."""
        net = line_network([0.01], v_lo=0.9801)
        assert delta(net, 1) == pytest.approx(0.00995)

    def test_voltage_drop_pct(self):
        """A 10% magnitude drop means v_lo = 0.81."""
        net = line_network([0.01, 0.01], voltage_drop_pct=0.1)
        assert net.v_lo[1:] == pytest.approx([0.81, 0.81])

    def test_bad_node(self):
        """The root has no headroom query."""
        net = line_network([0.01])
        with pytest.raises(ParameterError):
            delta(net, 0)


class TestRoundTrip:
    """Test write_network against load_network."""

    def test_synthetic_tree_round_trip(self, tmp_path):
        """Writing and reloading reproduces topology and parameters."""
        net = synthetic_tree(12, seed=3)
        path = write_network(net, tmp_path / "tree.csv")
        again = load_network(path, voltage_drop_pct=0.1)
        assert np.array_equal(again.parent, net.parent)
        assert np.allclose(again.r, net.r)
        assert np.allclose(again.x, net.x)
        assert np.array_equal(again.k_spaces, net.k_spaces)
        assert np.array_equal(again.m_cap, net.m_cap)

    def test_packaged_feeder(self):
        """The shipped 47-bus feeder is a tree with 46 charging buses."""
        net = load_network(TEMPLATES / "synthetic_47bus.csv", voltage_drop_pct=0.1)
        assert net.node_count == 46
        assert not net.is_line
        assert np.all(net.k_spaces[1:] == 1)
        assert np.all(net.m_cap[1:] == 8)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
