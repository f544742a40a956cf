"""
Instantaneous power allocation p(z): weighted utility maximization over the
EVs still charging, under node power caps, per-type rate caps and voltage
constraints from either load-flow model.

Three solvers share one result type:

* ``allocate_distflow`` - log-barrier Newton on the linearized voltage
  constraints.
* ``allocate_ac`` - the rank-relaxed branch-flow program with the
  rotated-cone constraint w_pp w_kk >= w_pk^2, reporting the exactness gap.
* ``fairness_closed_form`` - weighted proportional fairness on a line when
  only the deepest voltage constraint matters.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from evshare.barrier import BarrierResult, BarrierSolver, BarrierStats, LinearSlacks, stack_slacks
from evshare.errors import (
    InfeasibleLoadError,
    ParameterError,
    SolverError,
    UnsupportedSettingError,
    UnsupportedTopologyError,
)
from evshare.grid import Network
from evshare.loadflow import ac_solve, ac_sweep, distflow_voltages, voltage_violations
from evshare.log import get_logger
from evshare.stochastics import ClassTable, Utility

log = get_logger(__name__)

MODELS = ("distflow", "ac", "closed-form")
CERT_TOL = 1e-9
EXACTNESS_WARN = 1e-6
AC_TIE_BREAK = 1e-5
AC_GAP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class StateZ:
    """Uncharged counts z and total counts q per (node, type)."""

    z: np.ndarray
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, float))
        if np.any(z < 0):
            raise ParameterError("z must be nonnegative")
        object.__setattr__(self, "z", z)
        if self.q is not None:
            q = np.broadcast_to(np.asarray(self.q, float), z.shape)
            if np.any(z > q + 1e-12):
                raise ParameterError("z cannot exceed q")
            object.__setattr__(self, "q", q)

    @classmethod
    def zeros(cls, classes: ClassTable) -> "StateZ":
        return cls(np.zeros((classes.node_count, classes.type_count)))


def state_matrix(classes: ClassTable, state) -> np.ndarray:
    """z as an (I, J) float array from a StateZ, a matrix or a per-node vector."""
    z = state.z if isinstance(state, StateZ) else np.asarray(state, float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape != (classes.node_count, classes.type_count):
        raise ParameterError(f"state has shape {z.shape}, expected {(classes.node_count, classes.type_count)}")
    if np.any(z < 0):
        raise ParameterError("z must be nonnegative")
    return np.array(z, dtype=float)


@dataclass(eq=False)
class Allocation:
    """Per-EV rates p, class powers lam = z p and Lagrange multipliers.

    h1/h2 are per-node multipliers of the upper/lower voltage bounds in
    squared-voltage units, h3 the node-cap multiplier seen by each class and
    h4 the rate-cap multiplier.
    """

    p: np.ndarray
    lam: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    voltages: np.ndarray
    model: str
    kkt_residual: float = 0.0
    exactness_gap: float = 0.0
    stats: Optional[BarrierStats] = None

    @property
    def node_lam(self) -> np.ndarray:
        return self.lam.sum(axis=1)

    @property
    def total_power(self) -> float:
        return float(self.lam.sum())


def _zero_allocation(net: Network, classes: ClassTable, model: str) -> Allocation:
    shape = (classes.node_count, classes.type_count)
    zeros_i = np.zeros(classes.node_count)
    w = np.full(net.node_count + 1, net.w00)
    return Allocation(np.zeros(shape), np.zeros(shape), zeros_i, zeros_i.copy(),
                      np.zeros(shape), np.zeros(shape), w, model)


# ---------------------------------------------------------------------------
# Program building blocks shared with the invariant-point solver


@dataclass(frozen=True, eq=False)
class ActiveSet:
    """Coordinates (node, type) carried by a barrier program.

    `coef[a]` converts variable a into node power: z_a for per-EV rates,
    1 when the variables are node powers themselves.
    """

    nodes: np.ndarray
    types: np.ndarray
    coef: np.ndarray
    node_count: int
    type_count: int

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def empty(self) -> bool:
        return self.size == 0

    def node_matrix(self) -> np.ndarray:
        mat = np.zeros((self.node_count, self.size))
        mat[self.nodes, np.arange(self.size)] = self.coef
        return mat

    def scatter(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.node_count, self.type_count))
        out[self.nodes, self.types] = values
        return out

    def gather(self, matrix: np.ndarray) -> np.ndarray:
        return np.asarray(matrix)[self.nodes, self.types]


def headroom_blocked(net: Network) -> np.ndarray:
    """Nodes whose load would lower a node that has zero voltage headroom."""
    zero = net.deltas[1:] <= 0
    if not zero.any():
        return np.zeros(net.node_count, dtype=bool)
    return (net.sensitivity[zero] > 0).any(axis=0)


def active_set(net: Network, mask: np.ndarray, coef: np.ndarray) -> ActiveSet:
    mask = np.asarray(mask, bool) & ~headroom_blocked(net)[:, None]
    nodes, types = np.nonzero(mask)
    return ActiveSet(nodes, types, np.asarray(coef)[nodes, types], mask.shape[0], mask.shape[1])


@dataclass
class LinearBlocks:
    """Stacked linear constraints G x < h with a label per row."""

    g_mat: np.ndarray
    h_vec: np.ndarray
    labels: List[Tuple[str, int]] = field(default_factory=list)

    def rows(self, kind: str) -> np.ndarray:
        return np.array([r for r, (k, _) in enumerate(self.labels) if k == kind], dtype=int)

    def padded(self, extra_columns: int) -> LinearSlacks:
        g = np.hstack([self.g_mat, np.zeros((self.g_mat.shape[0], extra_columns))])
        return LinearSlacks(g, self.h_vec)


def linear_blocks(
    net: Network,
    active: ActiveSet,
    upper: np.ndarray,
    *,
    voltage: bool = True,
) -> LinearBlocks:
    """Distflow voltage rows, node caps and per-variable upper bounds."""
    s_mat = active.node_matrix()
    rows: List[np.ndarray] = []
    rhs: List[float] = []
    labels: List[Tuple[str, int]] = []
    if voltage:
        g_v = net.sensitivity @ s_mat
        for k in range(net.node_count):
            if np.any(g_v[k] > 0):
                rows.append(g_v[k])
                rhs.append(float(net.deltas[k + 1]))
                labels.append(("voltage", k))
    for i in range(net.node_count):
        if math.isfinite(net.m_cap[i + 1]) and np.any(s_mat[i] > 0):
            rows.append(s_mat[i])
            rhs.append(float(net.m_cap[i + 1]))
            labels.append(("cap", i))
    for a in range(active.size):
        if math.isfinite(upper[a]):
            e = np.zeros(active.size)
            e[a] = 1.0
            rows.append(e)
            rhs.append(float(upper[a]))
            labels.append(("box", a))
    g = np.vstack(rows) if rows else np.zeros((0, active.size))
    return LinearBlocks(g, np.asarray(rhs, float), labels)


class AcCone:
    """Rank-relaxed branch-flow constraints in variables x = (v, W[1..I]).

    The cross terms U_k = w_{parent(k),k} are affine in (v, W): solving the
    edge equations with their loss terms gives
    (Id + 2C) U = (Id + C + C P) W + diag(R) D S v,
    with C[k, e] = (R_k R_e + X_k X_e) / |z_e|^2 over strict descendants e
    of k, P the parent selector and S the node-power map of the variables.
    Slacks: w_pp w_kk - w_pk^2, w_pk, W - v_lo, v_hi - W.
    """

    def __init__(self, net: Network, s_mat: np.ndarray):
        size = net.node_count
        self.net = net
        self.n = s_mat.shape[1]
        r = net.r[1:]
        x = net.x[1:]
        sub = net.subtree_matrix
        strict = sub - np.eye(size)
        z2 = r ** 2 + x ** 2
        c_mat = strict * (np.outer(r, r) + np.outer(x, x)) / z2[None, :]
        parent = net.parent[1:]
        p_sel = np.zeros((size, size))
        for e in range(size):
            if parent[e] >= 1:
                p_sel[e, parent[e] - 1] = 1.0
        m_mat = np.eye(size) + 2.0 * c_mat
        self.g_w = np.linalg.solve(m_mat, np.eye(size) + c_mat + c_mat @ p_sel)
        self.g_v = np.linalg.solve(m_mat, (r[:, None] * sub) @ s_mat)
        self.parent = parent
        self.lo_nodes = np.flatnonzero(net.deltas[1:] > 0)
        self.hi_nodes = np.arange(size)
        dim = self.n + size
        self.jac_u = np.hstack([self.g_v, self.g_w])
        self.e_w = np.hstack([np.zeros((size, self.n)), np.eye(size)])
        self.e_parent = np.zeros((size, dim))
        for k in range(size):
            if parent[k] >= 1:
                self.e_parent[k] = self.e_w[parent[k] - 1]
        self.det_curvature = [
            np.outer(self.e_parent[k], self.e_w[k]) + np.outer(self.e_w[k], self.e_parent[k])
            - 2.0 * np.outer(self.jac_u[k], self.jac_u[k])
            for k in range(size)
        ]

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.n], x[self.n:]

    def cross_terms(self, x: np.ndarray) -> np.ndarray:
        v, w = self.split(x)
        return self.g_v @ v + self.g_w @ w

    def parent_w(self, x: np.ndarray) -> np.ndarray:
        _, w = self.split(x)
        return np.where(self.parent >= 1, w[np.maximum(self.parent - 1, 0)], self.net.w00)

    def determinants(self, x: np.ndarray) -> np.ndarray:
        _, w = self.split(x)
        u = self.cross_terms(x)
        return self.parent_w(x) * w - u ** 2

    @property
    def slack_count(self) -> int:
        size = self.net.node_count
        return 2 * size + len(self.lo_nodes) + len(self.hi_nodes)

    def __call__(self, x: np.ndarray):
        _, w = self.split(x)
        size = self.net.node_count
        u = self.cross_terms(x)
        wp = self.parent_w(x)
        det = wp * w - u ** 2
        jac_det = w[:, None] * self.e_parent + wp[:, None] * self.e_w - 2.0 * u[:, None] * self.jac_u
        v_lo = self.net.v_lo[1:]
        v_hi = self.net.v_hi[1:]
        s = np.concatenate([det, u, w[self.lo_nodes] - v_lo[self.lo_nodes], v_hi[self.hi_nodes] - w[self.hi_nodes]])
        jac = np.vstack([jac_det, self.jac_u, self.e_w[self.lo_nodes], -self.e_w[self.hi_nodes]])
        curv = [(k, self.det_curvature[k]) for k in range(size)]
        return s, jac, curv

    def exactness_gap(self, x: np.ndarray) -> float:
        _, w = self.split(x)
        det = self.determinants(x)
        return float(np.max(det / (self.parent_w(x) * w), initial=0.0))


# ---------------------------------------------------------------------------
# Solvers


def _utility_terms(classes: ClassTable, active: ActiveSet, z: np.ndarray):
    weights = active.gather(classes.weights)
    z_a = active.gather(z)
    coef_obj = z_a * weights
    scale = float(coef_obj.sum())
    unit = Utility(classes.form, 1.0, classes.alpha)
    return coef_obj / scale, scale, unit


def _initial_rates(net: Network, classes: ClassTable, active: ActiveSet, z: np.ndarray) -> np.ndarray:
    caps = classes.c_max[active.types]
    z_a = active.gather(z)
    node_total = z.sum(axis=1)[active.nodes]
    heads = net.deltas[1:][~(net.deltas[1:] <= 0)]
    delta_min = float(heads.min()) if heads.size else 0.0
    depth = float(np.max(net.sensitivity)) if net.sensitivity.size else 1.0
    p0 = np.full(active.size, delta_min / (2.0 * depth * z_a.sum()))
    p0 = np.minimum(p0, 0.5 * caps)
    m = net.m_cap[active.nodes + 1]
    with np.errstate(divide="ignore"):
        p0 = np.minimum(p0, np.where(np.isfinite(m), m / (2.0 * node_total), np.inf))
    return p0


def _multiplier_map(blocks: LinearBlocks, nu: np.ndarray, active: ActiveSet, scale: float):
    h2 = np.zeros(active.node_count)
    h3 = np.zeros((active.node_count, active.type_count))
    h4 = np.zeros((active.node_count, active.type_count))
    for row, (kind, idx) in enumerate(blocks.labels):
        value = nu[row] * scale
        if kind == "voltage":
            h2[idx] = value / 2.0
        elif kind == "cap":
            h3[idx, active.types[active.nodes == idx]] = value
        else:
            h4[active.nodes[idx], active.types[idx]] = value
    return h2, h3, h4


def _certify(net: Network, classes: ClassTable, p: np.ndarray, lam: np.ndarray, w: np.ndarray, model: str) -> None:
    bad = voltage_violations(net, w, CERT_TOL)
    if bad:
        raise SolverError(f"{model} allocation violates voltage bounds at nodes {[net.label(k) for k in bad]}")
    over = lam.sum(axis=1) > net.m_cap[1:] + CERT_TOL
    if over.any():
        raise SolverError(f"{model} allocation exceeds node caps at nodes {list(np.flatnonzero(over) + 1)}")
    if np.any(p > classes.c_max[None, :] + CERT_TOL):
        raise SolverError(f"{model} allocation exceeds c_max")


def allocate_distflow(net: Network, classes: ClassTable, state) -> Allocation:
    """Utility-maximizing rates under linearized Distflow voltage constraints."""
    z = state_matrix(classes, state)
    active = active_set(net, z > 0, z)
    if active.empty:
        return _zero_allocation(net, classes, "distflow")

    coef, scale, unit = _utility_terms(classes, active, z)
    caps = classes.c_max[active.types]
    blocks = linear_blocks(net, active, caps)

    solver = BarrierSolver(
        gradient=lambda p: -coef * unit.derivative(p),
        hessian=lambda p: np.diag(-coef * unit.second_derivative(p)),
        slacks=LinearSlacks(blocks.g_mat, blocks.h_vec),
        objective=lambda p: -float(coef @ unit.value(p)),
        domain=lambda p: bool(np.all(p > 0)),
    )
    result: BarrierResult = solver.solve(_initial_rates(net, classes, active, z))

    p = active.scatter(result.x)
    lam = z * p
    h2, h3, h4 = _multiplier_map(blocks, result.multipliers, active, scale)
    w = distflow_voltages(net, lam)
    _certify(net, classes, p, lam, w, "distflow")
    return Allocation(p, lam, np.zeros(net.node_count), h2, h3, h4, w, "distflow",
                      kkt_residual=result.stationarity * scale, stats=result.stats)


def ac_interior_point(net: Network, slacks, active: ActiveSet, p0: np.ndarray) -> np.ndarray:
    """Strictly feasible (x, W) for the relaxed AC program from a virtual-drop sweep, shrinking x until it fits."""
    heads = net.deltas[1:][net.deltas[1:] > 0]
    xi = 1e-3 * float(heads.min()) / net.node_count
    s_mat = active.node_matrix()
    p = p0.copy()
    for _ in range(30):
        try:
            sweep = ac_sweep(net, s_mat @ p, virtual_drop=xi)
            x0 = np.concatenate([p, sweep.w[1:]])
            s, _, _ = slacks(x0)
            if np.all(s > 0):
                return x0
        except InfeasibleLoadError:
            pass
        p = 0.5 * p
    raise InfeasibleLoadError("could not build a strictly feasible AC starting point")


def allocate_ac(net: Network, classes: ClassTable, state) -> Allocation:
    """Utility-maximizing rates under the relaxed AC branch-flow model."""
    z = state_matrix(classes, state)
    active = active_set(net, z > 0, z)
    if active.empty:
        return _zero_allocation(net, classes, "ac")

    coef, scale, unit = _utility_terms(classes, active, z)
    caps = classes.c_max[active.types]
    n = active.size
    size = net.node_count
    blocks = linear_blocks(net, active, caps, voltage=False)
    cone = AcCone(net, active.node_matrix())
    slacks = stack_slacks(cone, blocks.padded(size)) if blocks.labels else cone
    tie = AC_TIE_BREAK

    def gradient(x):
        return np.concatenate([-coef * unit.derivative(x[:n]), np.full(size, -tie)])

    def hessian(x):
        diag = np.concatenate([-coef * unit.second_derivative(x[:n]), np.zeros(size)])
        return np.diag(diag)

    def objective(x):
        return -float(coef @ unit.value(x[:n])) - tie * float(x[n:].sum())

    solver = BarrierSolver(gradient, hessian, slacks, objective=objective,
                           domain=lambda x: bool(np.all(x[:n] > 0)), gap_tol=AC_GAP_TOL)
    x0 = ac_interior_point(net, slacks, active, _initial_rates(net, classes, active, z))
    result = solver.solve(x0)

    p = active.scatter(result.x[:n])
    lam = z * p
    nu = result.multipliers
    lo_off = 2 * size
    hi_off = lo_off + len(cone.lo_nodes)
    h2 = np.zeros(size)
    h1 = np.zeros(size)
    h2[cone.lo_nodes] = nu[lo_off:hi_off] * scale
    h1[cone.hi_nodes] = nu[hi_off:hi_off + len(cone.hi_nodes)] * scale
    lin_nu = nu[cone.slack_count:]
    _, h3, h4 = _multiplier_map(blocks, lin_nu, active, scale)

    w = np.concatenate([[net.w00], result.x[n:]])
    gap = cone.exactness_gap(result.x)
    if gap > EXACTNESS_WARN:
        log.warning("ac.exactness_gap", gap=gap)
    physical = ac_solve(net, lam)
    _certify(net, classes, p, lam, physical.w, "ac")
    drift = float(np.max(np.abs(physical.w - w)))
    if drift > 1e-8:
        log.info("ac.relaxation_drift", drift=drift)
    return Allocation(p, lam, h1, h2, h3, h4, w, "ac", kkt_residual=result.stationarity * scale,
                      exactness_gap=gap, stats=result.stats)


# ---------------------------------------------------------------------------
# Closed form on a line


def _resistance_weighted(net: Network, classes: ClassTable) -> bool:
    ratio = classes.weights / net.cum_r[1:, None]
    return bool(np.allclose(ratio, ratio.flat[0], rtol=1e-12, atol=0.0))


def check_closed_form(net: Network, classes: ClassTable, require_resistance_weights: bool = False) -> None:
    if not net.is_line:
        raise UnsupportedTopologyError("the proportional-fairness closed form needs a line network")
    if classes.form != "log":
        raise UnsupportedSettingError("the closed form needs logarithmic utilities")
    if np.any(np.isfinite(classes.c_max)) or np.any(np.isfinite(net.m_cap[1:])):
        raise UnsupportedSettingError("the closed form excludes rate and node caps")
    if require_resistance_weights and not _resistance_weighted(net, classes):
        raise UnsupportedSettingError("weights must be proportional to path resistance")


def closed_form_rates(net: Network, classes: ClassTable, z: np.ndarray, include_empty: bool = False) -> np.ndarray:
    """p_ij = delta w_ij / (R_i sum_kl w_kl z_kl) for one state (I, J) or a stack (..., I, J).

    With `include_empty` the rate a single EV would get is also reported for
    classes with z_ij = 0.
    """
    z = np.asarray(z, float)
    deepest = net.deepest
    delta_d = float(net.deltas[deepest])
    cum_r = net.cum_r[1:, None]
    total = np.sum(classes.weights * z, axis=(-2, -1), keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = delta_d * classes.weights / (cum_r * total)
    if include_empty:
        return p
    return np.where(z > 0, p, 0.0)


def fairness_closed_form(
    net: Network,
    classes: ClassTable,
    state,
    *,
    require_resistance_weights: bool = False,
) -> Allocation:
    """Weighted proportional fairness on a line; equal rates when w = R."""
    check_closed_form(net, classes, require_resistance_weights)
    z = state_matrix(classes, state)
    if not np.any(z > 0):
        return _zero_allocation(net, classes, "closed-form")
    p = closed_form_rates(net, classes, z)
    lam = z * p
    deepest = net.deepest
    nu = float(np.sum(classes.weights * z)) / float(net.deltas[deepest])
    h2 = np.zeros(net.node_count)
    h2[deepest - 1] = nu / 2.0
    zeros = np.zeros_like(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        stationarity = np.where(z > 0, z * classes.weights / p - z * net.cum_r[1:, None] * nu, 0.0)
    return Allocation(p, lam, np.zeros(net.node_count), h2, zeros, zeros.copy(),
                      distflow_voltages(net, lam), "closed-form",
                      kkt_residual=float(np.max(np.abs(stationarity))))


# ---------------------------------------------------------------------------
# Balance property


@dataclass
class BalanceReport:
    checked: int
    violations: List[Tuple[Tuple[float, ...], int, int, float, float]]

    @property
    def ok(self) -> bool:
        return not self.violations


def balance_check(
    net: Network,
    classes: ClassTable,
    states: Optional[Iterable[Sequence[float]]] = None,
    *,
    samples: int = 100,
    seed: int = 0,
    rtol: float = 1e-9,
    rate_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> BalanceReport:
    """Check p_i(z + e_k) p_k(z) = p_i(z) p_k(z + e_i) for single-type line states."""
    if classes.type_count != 1:
        raise UnsupportedSettingError("the balance property is stated for a single EV type")
    if rate_fn is None:
        check_closed_form(net, classes)

        def rate_fn(zv: np.ndarray) -> np.ndarray:
            return closed_form_rates(net, classes, zv[:, None], include_empty=True)[:, 0]

    size = net.node_count
    if states is None:
        rng = np.random.default_rng(seed)
        drawn = rng.integers(0, 6, size=(samples, size))
        drawn[drawn.sum(axis=1) == 0, 0] = 1
        states = drawn
    checked = 0
    violations = []
    for raw in states:
        zv = np.asarray(raw, float).ravel()
        base = rate_fn(zv)
        for i in range(size):
            for k in range(size):
                plus_k = zv.copy()
                plus_k[k] += 1
                plus_i = zv.copy()
                plus_i[i] += 1
                lhs = rate_fn(plus_k)[i] * base[k]
                rhs = base[i] * rate_fn(plus_i)[k]
                checked += 1
                scale = max(abs(lhs), abs(rhs), 1e-300)
                if abs(lhs - rhs) > rtol * scale:
                    violations.append((tuple(zv), i + 1, k + 1, float(lhs), float(rhs)))
    if violations:
        log.warning("allocator.balance", violations=len(violations), checked=checked)
    return BalanceReport(checked, violations)


# ---------------------------------------------------------------------------
# Facade


_SOLVERS: Dict[str, Callable[[Network, ClassTable, np.ndarray], Allocation]] = {
    "distflow": allocate_distflow,
    "ac": allocate_ac,
    "closed-form": fairness_closed_form,
}


class Allocator:
    """Model selector with an LRU cache keyed by the state.

    Simulated states repeat often (the state space is small), so the cache
    turns most events into lookups.
    """

    def __init__(self, net: Network, classes: ClassTable, model: str = "distflow", *,
                 cache_size: int = 4096, jobs: int = 1):
        if model not in MODELS:
            raise ParameterError(f"unknown model {model!r}; expected one of {MODELS}")
        if model == "closed-form":
            check_closed_form(net, classes)
        self.net = net
        self.classes = classes
        self.model = model
        self.jobs = max(1, int(jobs))
        self._shape = (classes.node_count, classes.type_count)
        self._cached = lru_cache(maxsize=cache_size)(self._solve_key)

    def _solve_key(self, key: bytes) -> Allocation:
        z = np.frombuffer(key, dtype=float).reshape(self._shape)
        return _SOLVERS[self.model](self.net, self.classes, z)

    def __call__(self, state) -> Allocation:
        z = np.ascontiguousarray(state_matrix(self.classes, state))
        return self._cached(z.tobytes())

    def rates(self, state) -> np.ndarray:
        return self(state).p

    def allocate_many(self, states: np.ndarray) -> np.ndarray:
        """Rates for a stack of states (N, I, J)."""
        stack = np.asarray(states, float).reshape((-1,) + self._shape)
        if self.model == "closed-form":
            return closed_form_rates(self.net, self.classes, stack)
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return np.stack(list(pool.map(self.rates, stack)))
        return np.stack([self.rates(z) for z in stack])

    def cache_info(self):
        return self._cached.cache_info()
