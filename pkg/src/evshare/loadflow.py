"""
Voltages under the linearized Distflow model and the simplified AC model
with line losses, plus the check that Distflow dominates AC.

Powers are per-unit active node loads Lambda_i = sum_j z_ij p_ij; EVs draw no
reactive power, so reactive subtree flows consist of losses only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from evshare.errors import DominationError, InfeasibleLoadError, NonConvergenceError, ParameterError
from evshare.grid import Network
from evshare.log import get_logger

log = get_logger(__name__)

AC_TOL = 1e-10
AC_MAX_ITER = 200
DOMINATION_TOL = 1e-9


def node_power(net: Network, lam) -> np.ndarray:
    """Aggregate node powers from an (I,) vector or an (I, J) per-class matrix."""
    arr = np.asarray(lam, dtype=float)
    if arr.ndim == 2:
        arr = arr.sum(axis=1)
    if arr.shape != (net.node_count,):
        raise ParameterError(f"node power has shape {arr.shape}, expected ({net.node_count},)")
    if np.any(arr < 0):
        raise ParameterError("node powers must be nonnegative")
    return arr


def distflow_voltages(net: Network, lam) -> np.ndarray:
    """Linearized squared voltages, index 0 is the feeder (w00)."""
    power = node_power(net, lam)
    w = np.empty(net.node_count + 1)
    w[0] = net.w00
    w[1:] = net.w00 - 2.0 * (net.sensitivity @ power)
    return w


def voltage_violations(net: Network, w: np.ndarray, tol: float = DOMINATION_TOL) -> Tuple[int, ...]:
    """Nodes whose squared voltage leaves [v_lo, v_hi] by more than `tol`."""
    w = np.asarray(w, float)
    bad = (w[1:] < net.v_lo[1:] - tol) | (w[1:] > net.v_hi[1:] + tol)
    return tuple(int(k) + 1 for k in np.flatnonzero(bad))


@dataclass(frozen=True, eq=False)
class AcSolution:
    """Fixed point of the simplified AC equations.

    Per-node arrays have length I+1 with entry 0 for the feeder; per-edge
    arrays are indexed by the child node of the edge.
    """

    net: Network = field(repr=False)
    lam: np.ndarray
    v: np.ndarray
    w: np.ndarray
    w_pk: np.ndarray
    loss_p: np.ndarray
    loss_q: np.ndarray
    p_sub: np.ndarray
    q_sub: np.ndarray
    converged: bool
    iterations: int
    virtual_drop: float = 0.0

    @property
    def w_parent(self) -> np.ndarray:
        out = np.zeros_like(self.w)
        out[1:] = self.w[self.net.parent[1:]]
        return out

    def residuals(self) -> np.ndarray:
        """Per-edge residual of w_pk - w_kk - P_N(k) R - Q_N(k) X - xi."""
        net = self.net
        out = self.w_pk - self.w - self.p_sub * net.r - self.q_sub * net.x - self.virtual_drop
        out[0] = 0.0
        return out

    @property
    def feeder_injection(self) -> float:
        """Active power leaving the feeder, sending-end flows of the root edges."""
        kids = list(self.net.children[0])
        return float(np.sum(self.p_sub[kids] + self.loss_p[kids]))

    @property
    def energy_balance_residual(self) -> float:
        return self.feeder_injection - float(self.lam.sum()) - float(self.loss_p[1:].sum())

    @property
    def psd_margin(self) -> np.ndarray:
        """w_pp w_kk - w_pk^2 per edge."""
        out = self.w_parent * self.w - self.w_pk ** 2
        out[0] = 0.0
        return out


def _loss_terms(net: Network, w: np.ndarray, w_pk: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    size = net.node_count + 1
    lp = np.zeros(size)
    lq = np.zeros(size)
    k = np.arange(1, size)
    span = w[net.parent[k]] - 2.0 * w_pk[k] + w[k]
    z2 = net.r[k] ** 2 + net.x[k] ** 2
    lp[k] = span * net.r[k] / z2
    lq[k] = span * net.x[k] / z2
    return lp, lq


def ac_sweep(
    net: Network,
    lam,
    *,
    virtual_drop: float = 0.0,
    tol: float = AC_TOL,
    max_iter: int = AC_MAX_ITER,
) -> AcSolution:
    """Backward/forward sweep on the loss fixed point.

    `virtual_drop` adds a constant xi to every edge equation, which yields
    strictly interior points of the relaxed cone (w_pp w_kk - w_pk^2 > 0);
    xi = 0 is the physical operating point.
    """
    power = node_power(net, lam)
    size = net.node_count + 1
    sub = net.subtree_matrix
    v0 = math.sqrt(net.w00)
    v = np.full(size, v0)
    loss_p = np.zeros(size)
    loss_q = np.zeros(size)
    damping = 1.0
    last_change = math.inf
    rising = 0
    load_sub = sub @ power

    for iteration in range(1, max_iter + 1):
        # strict-subtree losses: sum over N(k) minus the edge into k
        p_sub = np.zeros(size)
        q_sub = np.zeros(size)
        p_sub[1:] = load_sub + sub @ loss_p[1:] - loss_p[1:]
        q_sub[1:] = sub @ loss_q[1:] - loss_q[1:]

        new_v = np.empty(size)
        new_v[0] = v0
        for k in net.order:
            vp = new_v[net.parent[k]]
            drop = p_sub[k] * net.r[k] + q_sub[k] * net.x[k] + virtual_drop
            disc = vp * vp - 4.0 * drop
            if disc < 0:
                raise InfeasibleLoadError(
                    f"no real voltage at node {net.label(k)}: discriminant {disc:.3e} (load beyond deliverability)"
                )
            new_v[k] = 0.5 * (vp + math.sqrt(disc))

        w = new_v ** 2
        w_pk = np.zeros(size)
        w_pk[1:] = new_v[net.parent[1:]] * new_v[1:] - virtual_drop
        target_p, target_q = _loss_terms(net, w, w_pk)
        loss_p = loss_p + damping * (target_p - loss_p)
        loss_q = loss_q + damping * (target_q - loss_q)

        change = float(np.max(np.abs(new_v - v)))
        v = new_v
        if change < tol:
            # final consistency pass with the converged losses
            p_sub[1:] = load_sub + sub @ loss_p[1:] - loss_p[1:]
            q_sub[1:] = sub @ loss_q[1:] - loss_q[1:]
            log.debug("ac.sweep", iterations=iteration, change=change, damping=damping)
            return AcSolution(net, power, v, w, w_pk, loss_p, loss_q, p_sub, q_sub, True, iteration, virtual_drop)
        rising = rising + 1 if change > last_change else 0
        if rising >= 3 and damping == 1.0:
            damping = 0.5
            log.warning("ac.damping", iteration=iteration, change=change)
        last_change = change

    raise NonConvergenceError("AC sweep hit the iteration cap", gap=last_change, iterations=max_iter)


def ac_solve(net: Network, lam, tol: float = AC_TOL, max_iter: int = AC_MAX_ITER) -> AcSolution:
    """Physical (high-voltage branch) solution of the simplified AC equations."""
    return ac_sweep(net, lam, tol=tol, max_iter=max_iter)


@dataclass(frozen=True, eq=False)
class DominationReport:
    w_lin: np.ndarray
    w_ac: np.ndarray
    gaps: np.ndarray
    violations: Tuple[int, ...]
    tol: float = DOMINATION_TOL

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_for_violations(self) -> None:
        if self.violations:
            raise DominationError("Distflow voltages fail to dominate AC", nodes=self.violations)


def check_domination(net: Network, lam, *, solution: AcSolution = None, tol: float = DOMINATION_TOL) -> DominationReport:
    """Gaps w_lin - w_ac per node; flags nodes where AC exceeds Distflow or Distflow exceeds w00."""
    w_lin = distflow_voltages(net, lam)
    ac = solution if solution is not None else ac_solve(net, lam)
    gaps = w_lin - ac.w
    bad = (ac.w[1:] > w_lin[1:] + tol) | (w_lin[1:] > net.w00 + tol)
    violations = tuple(int(k) + 1 for k in np.flatnonzero(bad))
    if violations:
        log.warning("loadflow.domination", nodes=[net.label(k) for k in violations])
    return DominationReport(w_lin, ac.w, gaps, violations, tol)
