"""
Radial distribution network: topology, per-edge impedances, node limits,
path/subtree tables and CSV ingestion.

Node 0 is the feeder (root) and hosts no chargers. Arrays are indexed by node
id 0..I; entry 0 of per-edge arrays is a placeholder. Voltage bounds are
squared magnitudes (W-space).
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from evshare.errors import NetworkFormatError, ParameterError, TopologyError
from evshare.log import get_logger

log = get_logger(__name__)

CSV_HEADER = ("node", "parent", "r_pu", "x_pu", "k_spaces", "m_cap")

Edge = Tuple[int, int]


def _frozen(values: Iterable[float], dtype=float) -> np.ndarray:
    arr = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PathTables:
    """Per-node path and subtree queries.

    Attributes:
        path_edges: path_edges[k] is the ordered edge list P(k) from the feeder to k.
        subtree_nodes: subtree_nodes[k] is N(k), the nodes of the subtree rooted at k.
        cum_r: cum_r[k] is the resistance accumulated along P(k); cum_r[0] = 0.
    """

    path_edges: Tuple[Tuple[Edge, ...], ...]
    subtree_nodes: Tuple[FrozenSet[int], ...]
    cum_r: np.ndarray


@dataclass(frozen=True, eq=False)
class Network:
    """Rooted radial tree with impedances, voltage bounds and node limits."""

    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    w00: float
    v_lo: np.ndarray
    v_hi: np.ndarray
    k_spaces: np.ndarray
    m_cap: np.ndarray
    labels: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        size = len(self.parent)
        if size < 2:
            raise ParameterError("network needs at least one non-root node")
        for name in ("r", "x", "v_lo", "v_hi", "k_spaces", "m_cap"):
            if len(getattr(self, name)) != size:
                raise ParameterError(f"{name} has length {len(getattr(self, name))}, expected {size}")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(size)))
        for name, dtype in (("parent", int), ("r", float), ("x", float), ("v_lo", float),
                            ("v_hi", float), ("k_spaces", float), ("m_cap", float)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        object.__setattr__(self, "w00", float(self.w00))
        self._validate()

    def _validate(self) -> None:
        size = self.node_count + 1
        nodes = np.arange(1, size)
        if self.parent[0] != -1:
            raise TopologyError("node 0 is the root and has no parent")
        bad = [int(k) for k in nodes if not 0 <= self.parent[k] < size]
        if bad:
            raise TopologyError("parent outside node range", nodes=bad)
        selfish = [int(k) for k in nodes if self.parent[k] == k]
        if selfish:
            raise TopologyError("node is its own parent (cycle)", nodes=selfish)
        unreached = sorted(set(nodes.tolist()) - set(self.order))
        if unreached:
            raise TopologyError("nodes do not reach the root (cycle or disconnected)", nodes=unreached)
        if np.any(self.r[1:] <= 0):
            raise ParameterError(f"resistance must be positive at nodes {np.flatnonzero(self.r[1:] <= 0) + 1}")
        if np.any(self.x[1:] < 0):
            raise ParameterError("reactance must be nonnegative")
        if not self.w00 > 0:
            raise ParameterError("w00 must be positive")
        if np.any(self.v_lo[1:] <= 0) or np.any(self.v_lo[1:] > self.w00):
            raise ParameterError("need 0 < v_lo <= w00 at every node")
        if np.any(self.v_hi[1:] < self.w00):
            raise ParameterError("need v_hi >= w00 at every node")
        if np.any(self.k_spaces[1:] <= 0):
            raise ParameterError("parking spaces must be positive")
        if np.any(self.m_cap[1:] <= 0):
            raise ParameterError("node power caps must be positive")

    @property
    def node_count(self) -> int:
        return len(self.parent) - 1

    @property
    def nodes(self) -> range:
        return range(1, self.node_count + 1)

    @cached_property
    def children(self) -> Tuple[Tuple[int, ...], ...]:
        kids: List[List[int]] = [[] for _ in range(self.node_count + 1)]
        for k in range(1, self.node_count + 1):
            p = int(self.parent[k])
            if 0 <= p <= self.node_count and p != k:
                kids[p].append(k)
        return tuple(tuple(c) for c in kids)

    @cached_property
    def order(self) -> Tuple[int, ...]:
        """Non-root nodes in breadth-first order from the feeder."""
        seen: List[int] = []
        queue = deque(self.children[0])
        visited = set()
        while queue:
            k = queue.popleft()
            if k in visited:
                continue
            visited.add(k)
            seen.append(k)
            queue.extend(self.children[k])
        return tuple(seen)

    @cached_property
    def paths(self) -> PathTables:
        size = self.node_count + 1
        path: List[Tuple[Edge, ...]] = [()] * size
        cum = np.zeros(size)
        for k in self.order:
            p = int(self.parent[k])
            path[k] = path[p] + ((p, k),)
            cum[k] = cum[p] + self.r[k]
        subtree: List[FrozenSet[int]] = [frozenset()] * size
        for k in reversed((0,) + self.order):
            members = {k} if k else set()
            for c in self.children[k]:
                members |= subtree[c]
            subtree[k] = frozenset(members)
        return PathTables(tuple(path), tuple(subtree), _frozen(cum))

    @property
    def cum_r(self) -> np.ndarray:
        return self.paths.cum_r

    @cached_property
    def subtree_matrix(self) -> np.ndarray:
        """I x I 0/1 matrix, entry [s-1, k-1] = 1 iff k is in N(s)."""
        n = self.node_count
        mat = np.zeros((n, n))
        for s in self.nodes:
            for k in self.paths.subtree_nodes[s]:
                mat[s - 1, k - 1] = 1.0
        mat.setflags(write=False)
        return mat

    @cached_property
    def sensitivity(self) -> np.ndarray:
        """A[k-1, m-1] = cum_r of the deepest common ancestor of k and m.

        The linearized voltage is w_lin = w00 - 2 A lam.
        """
        d = self.subtree_matrix
        mat = d.T @ (self.r[1:, None] * d)
        mat.setflags(write=False)
        return mat

    @cached_property
    def deltas(self) -> np.ndarray:
        return _frozen((self.w00 - self.v_lo) / 2.0)

    @cached_property
    def is_line(self) -> bool:
        return all(len(c) <= 1 for c in self.children)

    @property
    def deepest(self) -> int:
        return int(self.order[-1]) if self.is_line else int(np.argmax(self.cum_r))

    def label(self, node: int) -> int:
        return self.labels[node]


def delta(net: Network, node: int) -> float:
    """Voltage headroom (w00 - v_lo[node]) / 2 in per-unit power."""
    if not 0 < node <= net.node_count:
        raise ParameterError(f"node {node} outside 1..{net.node_count}")
    return float(net.deltas[node])


def _bounds(w00: float, size: int, v_lo, v_hi, voltage_drop_pct: Optional[float]):
    v0 = math.sqrt(w00)
    pct = 0.1 if voltage_drop_pct is None else voltage_drop_pct
    if not 0 <= pct < 1:
        raise ParameterError("voltage_drop_pct must lie in [0, 1)")
    lo = ((1 - pct) * v0) ** 2 if v_lo is None or voltage_drop_pct is not None else v_lo
    hi = ((1 + pct) * v0) ** 2 if v_hi is None else v_hi
    lo_arr = np.broadcast_to(np.asarray(lo, dtype=float), (size - 1,))
    hi_arr = np.broadcast_to(np.asarray(hi, dtype=float), (size - 1,))
    return np.concatenate([[w00], lo_arr]), np.concatenate([[w00], hi_arr])


def line_network(
    r: Sequence[float],
    x: Optional[Sequence[float]] = None,
    *,
    w00: float = 1.0,
    v_lo: Union[float, Sequence[float], None] = None,
    v_hi: Union[float, Sequence[float], None] = None,
    voltage_drop_pct: Optional[float] = None,
    k_spaces: Union[float, Sequence[float]] = math.inf,
    m_cap: Union[float, Sequence[float]] = math.inf,
) -> Network:
    """Line 0 - 1 - ... - I with edge (k-1, k) carrying r[k-1], x[k-1]."""
    n = len(r)
    xs = list(r) if x is None else list(x)
    lo, hi = _bounds(w00, n + 1, v_lo, v_hi, voltage_drop_pct)
    return Network(
        parent=np.arange(-1, n),
        r=np.concatenate([[0.0], np.asarray(r, dtype=float)]),
        x=np.concatenate([[0.0], np.asarray(xs, dtype=float)]),
        w00=w00,
        v_lo=lo,
        v_hi=hi,
        k_spaces=np.concatenate([[0.0], np.broadcast_to(np.asarray(k_spaces, float), (n,))]),
        m_cap=np.concatenate([[np.inf], np.broadcast_to(np.asarray(m_cap, float), (n,))]),
    )


def synthetic_tree(
    buses: int = 47,
    seed: int = 0,
    *,
    w00: float = 1.0,
    voltage_drop_pct: float = 0.1,
    r_range: Tuple[float, float] = (0.001, 0.01),
    x_over_r: float = 1.0,
    k_spaces: float = 1.0,
    m_cap: float = 8.0,
) -> Network:
    """Feeder-like random radial tree with `buses` buses including the root.

    Each new bus attaches to one of the five most recent buses, which gives a
    long trunk with short laterals.
    """
    if buses < 2:
        raise ParameterError("a tree needs at least two buses")
    rng = np.random.default_rng(seed)
    parent = [-1]
    for k in range(1, buses):
        lo = max(0, k - 5)
        parent.append(int(rng.integers(lo, k)))
    r = np.concatenate([[0.0], rng.uniform(*r_range, size=buses - 1)])
    lo, hi = _bounds(w00, buses, None, None, voltage_drop_pct)
    return Network(
        parent=np.array(parent),
        r=r,
        x=r * x_over_r,
        w00=w00,
        v_lo=lo,
        v_hi=hi,
        k_spaces=np.concatenate([[0.0], np.full(buses - 1, k_spaces)]),
        m_cap=np.concatenate([[np.inf], np.full(buses - 1, m_cap)]),
    )


def _parse_float(token: str, column: str, line: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise NetworkFormatError(f"column {column}: cannot parse {token!r}", line=line) from None


def _parse_int(token: str, column: str, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise NetworkFormatError(f"column {column}: cannot parse {token!r} as integer", line=line) from None


def load_network(
    path: Union[str, Path],
    *,
    w00: float = 1.0,
    v_lo: Union[float, Sequence[float], None] = None,
    v_hi: Union[float, Sequence[float], None] = None,
    voltage_drop_pct: Optional[float] = None,
    exclude: Iterable[int] = (),
) -> Network:
    """Read the `node,parent,r_pu,x_pu,k_spaces,m_cap` CSV schema.

    Excluded buses are removed; their children re-attach to the nearest kept
    ancestor with the series impedance added. Nodes are relabelled 1..I in
    file order and the original ids are kept in `Network.labels`.
    """
    path = Path(path)
    if not path.is_file():
        raise NetworkFormatError(f"network file not found: {path}")

    rows: Dict[int, Tuple[int, float, float, float, float]] = {}
    header_seen = False
    with path.open(newline="") as handle:
        for lineno, raw in enumerate(handle, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in next(csv.reader([text]))]
            if not header_seen:
                if tuple(fields) != CSV_HEADER:
                    raise NetworkFormatError(f"expected header {','.join(CSV_HEADER)}", line=lineno)
                header_seen = True
                continue
            if len(fields) != len(CSV_HEADER):
                raise NetworkFormatError(f"expected {len(CSV_HEADER)} fields, got {len(fields)}", line=lineno)
            node = _parse_int(fields[0], "node", lineno)
            parent = _parse_int(fields[1], "parent", lineno)
            if node <= 0:
                raise NetworkFormatError("node ids must be positive integers", line=lineno)
            if node in rows:
                raise NetworkFormatError(f"duplicate node {node}", line=lineno)
            if parent == node:
                raise TopologyError(f"line {lineno}: node {node} is its own parent (cycle)", nodes=[node])
            values = [_parse_float(fields[i], CSV_HEADER[i], lineno) for i in range(2, 6)]
            if values[0] <= 0 or values[1] < 0 or values[2] <= 0 or values[3] <= 0:
                raise ParameterError(f"line {lineno}: nonpositive parameter for node {node}")
            rows[node] = (parent, *values)
    if not header_seen or not rows:
        raise NetworkFormatError("network file has no rows")

    excluded = set(int(e) for e in exclude)
    unknown_parents = sorted({p for p, *_ in rows.values() if p != 0 and p not in rows})
    if unknown_parents:
        raise TopologyError("parent ids without a row", nodes=unknown_parents)

    kept = [n for n in rows if n not in excluded]
    index = {0: 0, **{n: i for i, n in enumerate(kept, start=1)}}
    size = len(kept) + 1
    parent = np.full(size, -1)
    r = np.zeros(size)
    x = np.zeros(size)
    k_sp = np.zeros(size)
    m = np.full(size, np.inf)
    for n in kept:
        p, rr, xx, kk, mm = rows[n]
        walked = set()
        while p in excluded:
            if p in walked:
                raise TopologyError("cycle through excluded buses", nodes=sorted(walked))
            walked.add(p)
            pp, pr, px, _, _ = rows[p]
            rr, xx, p = rr + pr, xx + px, pp
        i = index[n]
        parent[i] = index[p]
        r[i], x[i], k_sp[i], m[i] = rr, xx, kk, mm
    if excluded:
        log.info("grid.excluded", buses=sorted(excluded & set(rows)), remaining=len(kept))

    lo, hi = _bounds(w00, size, v_lo, v_hi, voltage_drop_pct)
    net = Network(parent=parent, r=r, x=x, w00=w00, v_lo=lo, v_hi=hi,
                  k_spaces=k_sp, m_cap=m, labels=(0, *kept))
    net.paths  # eager path tables
    return net


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else repr(float(value))


def write_network(net: Network, path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for k in net.nodes:
            writer.writerow([
                net.label(k),
                net.label(int(net.parent[k])),
                _fmt(net.r[k]),
                _fmt(net.x[k]),
                _fmt(net.k_spaces[k]),
                _fmt(net.m_cap[k]),
            ])
    return path
