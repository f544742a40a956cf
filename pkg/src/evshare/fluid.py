"""
Fluid model of the charging network.

* ``picard_solve`` iterates the transient fluid equations on a time grid.
* ``invariant_solve`` finds the invariant point as the maximizer of
  sum_ij G_ij(Lambda_ij) over the feasible node powers, with
  G'_ij = u'_ij(g^-1_ij(.)).
* ``explicit_markov`` and ``markov_ode`` give closed-form and ODE
  trajectories in the exponential setting; they serve as oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import integrate

from evshare.allocator import (
    AC_GAP_TOL,
    AC_TIE_BREAK,
    AcCone,
    Allocator,
    StateZ,
    ac_interior_point,
    active_set,
    linear_blocks,
    state_matrix,
)
from evshare.barrier import BarrierSolver, LinearSlacks, stack_slacks
from evshare.errors import (
    NonConvergenceError,
    ParameterError,
    PreconditionError,
    RangeError,
    UnsupportedSettingError,
    UnsupportedTopologyError,
)
from evshare.grid import Network
from evshare.log import get_logger
from evshare.stochastics import (
    ClassTable,
    Independent,
    IndependentExp,
    JointBD,
    Utility,
    expected_occupancy,
    g_derivative,
    g_inverse,
    g_value,
    gamma_effective,
)

log = get_logger(__name__)

PICARD_TOL = 1e-8
PICARD_MAX_ITER = 200
GEOMETRIC_RATIO = 1.1
GEOMETRIC_START = 1e-9
GEOMETRIC_SPAN = 4.0
CHUNK_ENTRIES = 2_000_000
BOX_TOL = 1e-9

RateFn = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class FluidTrajectory:
    """z(t), q(t), gamma(t) and cumulative service on a uniform grid; arrays are (T, I, J)."""

    t: np.ndarray
    z: np.ndarray
    q: np.ndarray
    gamma: np.ndarray
    service: np.ndarray
    method: str = "picard"
    iterations: int = 0
    gap: float = 0.0

    def at(self, time: float) -> np.ndarray:
        return self.z[int(np.argmin(np.abs(self.t - time)))]

    def to_frame(self, labels: Optional[Sequence[int]] = None) -> pd.DataFrame:
        steps, nodes, types = self.z.shape
        node_ids = np.arange(1, nodes + 1) if labels is None else np.asarray(labels)[1:]
        return pd.DataFrame({
            "t": np.repeat(self.t, nodes * types),
            "node": np.tile(np.repeat(node_ids, types), steps),
            "type": np.tile(np.arange(types), steps * nodes),
            "z": self.z.ravel(),
            "q": self.q.ravel(),
            "gamma": self.gamma.ravel(),
        })


@dataclass(eq=False)
class InvariantPoint:
    """Invariant point of the fluid model and its Lagrange multipliers.

    `h` is the total voltage multiplier in node-power units; on a line only
    the deepest constraint binds and the stationarity reads
    G'_ij(Lambda*_ij) = h R_i.
    """

    lam_star: np.ndarray
    z_star: np.ndarray
    p_star: np.ndarray
    success_prob: np.ndarray
    gamma: np.ndarray
    h: float
    multipliers: Dict[str, np.ndarray]
    objective: float
    model: str
    kkt_residual: float = 0.0
    little_residual: float = 0.0


# ---------------------------------------------------------------------------
# Invariant point


def _identity_anchor(classes: ClassTable) -> float:
    anchor = Utility(classes.form, 1.0, classes.alpha).identity_point
    return 1.0 if anchor is None else anchor


def _g_antiderivative(gamma: float, joint: JointBD, unit: Utility, weight: float, x0: float, x1: float) -> float:
    """G = int_{x0}^{x1} u'(x) g'(x) dx, the objective term in the rate variable."""
    if x0 == x1 or gamma == 0:
        return 0.0
    lo, hi = sorted((x0, x1))
    kinks = [k for k in _kinks(joint) if lo < k < hi] if math.isfinite(hi) else []

    def integrand(x: float) -> float:
        return float(unit.derivative(x)) * float(g_derivative(gamma, joint, x))

    value, _ = integrate.quad(integrand, lo, hi, points=kinks or None, limit=400)
    return weight * (value if x1 >= x0 else -value)


def _kinks(joint: JointBD) -> List[float]:
    thetas = getattr(joint, "thetas", None)
    if thetas is not None:
        return list(thetas)
    sat = joint.saturation
    return [sat] if math.isfinite(sat) and sat > 0 else []


def _check_support(classes: ClassTable, gamma: np.ndarray) -> None:
    for j, joint in enumerate(classes.joint):
        if not np.any(gamma[:, j] > 0):
            continue
        if joint.saturation <= 0:
            raise PreconditionError(f"type {j}: E[min(D x, B)] is flat in x, no invariant point (inf D/B is infinite)")
        c_max = classes.c_max[j]
        if joint.inf_d_over_b > 1.0 / c_max:
            log.info("fluid.support_condition", type=j, inf_d_over_b=joint.inf_d_over_b, c_max=c_max,
                     note="g is flat past the saturation rate; the box constraint handles the kink")


def invariant_solve(net: Network, classes: ClassTable, model: str = "distflow") -> InvariantPoint:
    """Invariant point from the concave program over node powers.

    G is only used through G' and G'' inside the barrier method. A box
    constraint active within 1e-9 means p* = c_max.
    """
    if model not in ("distflow", "ac"):
        raise ParameterError(f"invariant point supports distflow or ac, not {model!r}")
    gamma = gamma_effective(net, classes)
    _check_support(classes, gamma)
    shape = gamma.shape
    unit = Utility(classes.form, 1.0, classes.alpha)

    c_top = np.array([min(classes.c_max[j], classes.joint[j].saturation) for j in range(shape[1])])
    top = np.zeros(shape)
    for i, j in np.ndindex(*shape):
        joint = classes.joint[j]
        if gamma[i, j] > 0:
            cap = c_top[j]
            top[i, j] = g_value(gamma[i, j], joint, cap) if math.isfinite(cap) else gamma[i, j] * joint.increasing_top

    active = active_set(net, gamma > 0, np.ones(shape))
    point_lam = np.zeros(shape)
    multipliers = {
        "voltage": np.zeros(net.node_count),
        "voltage_upper": np.zeros(net.node_count),
        "node_cap": np.zeros(net.node_count),
        "box": np.zeros(shape),
    }
    kkt = 0.0
    if not active.empty:
        g_a = active.gather(gamma)
        w_a = active.gather(classes.weights)
        joints = [classes.joint[j] for j in active.types]
        top_a = active.gather(top)
        mean_d = np.array([jt.mean_d for jt in joints])
        scale = float(np.sum(w_a * g_a * mean_d))
        n = active.size

        def rates(lam: np.ndarray) -> np.ndarray:
            return np.array([g_inverse(g_a[a], joints[a], lam[a]) for a in range(n)])

        def grad_lam(lam: np.ndarray) -> np.ndarray:
            return -w_a * unit.derivative(rates(lam)) / scale

        def hess_lam(lam: np.ndarray) -> np.ndarray:
            x = rates(lam)
            slope = np.array([g_derivative(g_a[a], joints[a], x[a]) for a in range(n)])
            return np.diag(-w_a * unit.second_derivative(x) / (slope * scale))

        blocks = linear_blocks(net, active, top_a, voltage=(model == "distflow"))
        heads = net.deltas[1:][net.deltas[1:] > 0]
        depth = float(np.max(net.sensitivity))
        per_node = np.bincount(active.nodes, minlength=net.node_count)[active.nodes]
        lam0 = np.minimum(0.5 * top_a, float(heads.min()) / (2.0 * depth * n))
        m_a = net.m_cap[active.nodes + 1]
        lam0 = np.minimum(lam0, np.where(np.isfinite(m_a), m_a / (2.0 * per_node), np.inf))

        if model == "distflow":
            solver = BarrierSolver(grad_lam, hess_lam, LinearSlacks(blocks.g_mat, blocks.h_vec),
                                   domain=lambda lam: bool(np.all(lam > 0)))
            result = solver.solve(lam0)
            lam_opt = result.x
            nu = result.multipliers
            for row, (kind, idx) in enumerate(blocks.labels):
                if kind == "voltage":
                    multipliers["voltage"][idx] = nu[row] * scale
                elif kind == "cap":
                    multipliers["node_cap"][idx] = nu[row] * scale
                else:
                    multipliers["box"][active.nodes[idx], active.types[idx]] = nu[row] * scale
        else:
            size = net.node_count
            cone = AcCone(net, active.node_matrix())
            slacks = stack_slacks(cone, blocks.padded(size)) if blocks.labels else cone

            def gradient(x):
                return np.concatenate([grad_lam(x[:n]), np.full(size, -AC_TIE_BREAK)])

            def hessian(x):
                out = np.zeros((n + size, n + size))
                out[:n, :n] = hess_lam(x[:n])
                return out

            x0 = ac_interior_point(net, slacks, active, lam0)
            solver = BarrierSolver(gradient, hessian, slacks, domain=lambda x: bool(np.all(x[:n] > 0)),
                                   gap_tol=AC_GAP_TOL)
            result = solver.solve(x0)
            lam_opt = result.x[:n]
            nu = result.multipliers
            lo_off = 2 * size
            hi_off = lo_off + len(cone.lo_nodes)
            # dW/dLambda is about -2 sensitivity, so twice the W multiplier is in node-power units
            multipliers["voltage"][cone.lo_nodes] = 2.0 * nu[lo_off:hi_off] * scale
            multipliers["voltage_upper"][cone.hi_nodes] = 2.0 * nu[hi_off:hi_off + len(cone.hi_nodes)] * scale
            lin = nu[cone.slack_count:]
            for row, (kind, idx) in enumerate(blocks.labels):
                if kind == "cap":
                    multipliers["node_cap"][idx] = lin[row] * scale
                elif kind == "box":
                    multipliers["box"][active.nodes[idx], active.types[idx]] = lin[row] * scale
            gap = cone.exactness_gap(result.x)
            if gap > 1e-6:
                log.warning("fluid.exactness_gap", gap=gap)
        kkt = result.stationarity * scale
        point_lam = active.scatter(lam_opt)

    lam_star = point_lam.copy()
    p_star = np.zeros(shape)
    for i, j in np.ndindex(*shape):
        if gamma[i, j] <= 0:
            continue
        if top[i, j] - lam_star[i, j] <= BOX_TOL * max(1.0, top[i, j]):
            lam_star[i, j] = top[i, j]
            p_star[i, j] = classes.c_max[j] if math.isfinite(classes.c_max[j]) else c_top[j]
        else:
            try:
                p_star[i, j] = g_inverse(gamma[i, j], classes.joint[j], lam_star[i, j])
            except RangeError:
                p_star[i, j] = c_top[j]
    with np.errstate(divide="ignore", invalid="ignore"):
        z_star = np.where(p_star > 0, lam_star / p_star, 0.0)
    z_star = np.where(np.isinf(p_star), 0.0, z_star)

    success = np.zeros(shape)
    little = 0.0
    objective = 0.0
    anchor = _identity_anchor(classes)
    for i, j in np.ndindex(*shape):
        if gamma[i, j] <= 0:
            continue
        joint = classes.joint[j]
        success[i, j] = float(joint.success_prob(p_star[i, j]))
        little = max(little, abs(z_star[i, j] - gamma[i, j] * joint.mean_sojourn(p_star[i, j])))
        objective += _g_antiderivative(gamma[i, j], joint, unit, classes.weights[i, j], anchor, p_star[i, j])

    h = float(multipliers["voltage"].sum())
    log.info("fluid.invariant", model=model, h=h, little_residual=little, kkt=kkt)
    return InvariantPoint(lam_star, z_star, p_star, success, gamma, h, multipliers, objective, model,
                          kkt_residual=kkt, little_residual=little)


def success_probabilities(point: InvariantPoint) -> np.ndarray:
    """P(p* D >= B) per class."""
    return point.success_prob


def aggregate_success(point: InvariantPoint) -> float:
    total = float(point.gamma.sum())
    return float((point.gamma * point.success_prob).sum() / total) if total > 0 else float("nan")


def erlang_success(point: InvariantPoint, net: Network, classes: ClassTable) -> np.ndarray:
    """Fluid success fraction 1 - z*/E[Q] with Erlang-loss occupancies."""
    occupancy = expected_occupancy(net, classes)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(occupancy > 0, 1.0 - point.z_star / occupancy, np.nan)


def objective_diagnostic(
    point: InvariantPoint,
    classes: ClassTable,
    *,
    samples: int = 1_000_000,
    seed: int = 0,
) -> pd.DataFrame:
    """Compare G(Lambda*) with gamma E[D u(min(p*, B/D))].

    G is integrated from the anchor rate x0 with u(x0) = 0, so the identity
    reads lhs = rhs - anchor where anchor = gamma E[D u(min(x0, B/D))]
    (zero whenever B/D >= x0 almost surely).
    """
    if classes.form != "log":
        raise UnsupportedSettingError("the objective identity is checked for logarithmic utilities")
    unit = Utility("log", 1.0)
    x0 = 1.0
    rng = np.random.default_rng(seed)
    rows = []
    for i, j in np.ndindex(*point.lam_star.shape):
        gamma = point.gamma[i, j]
        if gamma <= 0:
            continue
        joint = classes.joint[j]
        weight = classes.weights[i, j]
        p = float(point.p_star[i, j])
        lhs = _g_antiderivative(gamma, joint, unit, weight, x0, p)
        rhs, rhs_hw = _log_rate(joint, p, rng, samples)
        anchor, anchor_hw = _log_rate(joint, x0, rng, samples)
        rhs *= gamma * weight
        anchor *= gamma * weight
        halfwidth = gamma * weight * (rhs_hw + anchor_hw)
        gap = abs(lhs - (rhs - anchor))
        rows.append({
            "node": i + 1, "type": j, "lhs": lhs, "rhs": rhs, "anchor": anchor,
            "gap": gap, "rel_gap": gap / max(abs(rhs - anchor), 1e-12), "mc_halfwidth": halfwidth,
        })
    return pd.DataFrame(rows, columns=["node", "type", "lhs", "rhs", "anchor", "gap", "rel_gap", "mc_halfwidth"])


def _log_rate(joint: JointBD, p: float, rng: np.random.Generator, samples: int):
    """E[D log min(p, B/D)] in closed form, else Monte Carlo with a 3-sigma half-width."""
    closed = joint.log_rate(p) if math.isfinite(p) else None
    if closed is not None:
        return float(closed), 0.0
    b, d = joint.sample(rng, samples)
    keep = d > 0
    with np.errstate(divide="ignore"):
        terms = np.where(keep, d * np.log(np.minimum(p, b / np.where(keep, d, 1.0))), 0.0)
    return float(terms.mean()), 3.0 * float(terms.std(ddof=1)) / math.sqrt(samples)


# ---------------------------------------------------------------------------
# Transient equations


def _time_grid(horizon: float, dt: float, refine: bool):
    if dt <= 0 or horizon < 0:
        raise ParameterError("need dt > 0 and horizon >= 0")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ParameterError("horizon must be a multiple of dt")
    uniform = np.arange(steps + 1) * dt
    if not refine or steps == 0:
        return uniform, np.arange(steps + 1)
    count = int(math.ceil(math.log(GEOMETRIC_SPAN / GEOMETRIC_START) / math.log(GEOMETRIC_RATIO)))
    geometric = dt * GEOMETRIC_START * GEOMETRIC_RATIO ** np.arange(count + 1)
    geometric = geometric[geometric < min(GEOMETRIC_SPAN * dt, horizon)]
    nodes = np.union1d(uniform, geometric)
    return nodes, np.searchsorted(nodes, uniform)


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Logarithmic mean (a - b) / (log a - log b); exact cell average of an exponential."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = 0.5 * (a + b)
    ok = (a > 0) & (b > 0) & (np.abs(a - b) > 1e-9 * np.maximum(a, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = (a - b) / (np.log(a) - np.log(b))
    return np.where(ok, lm, out)


def _cumulative(tau: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cumulative integral along axis 0 with the log-mean cell rule."""
    h = np.diff(tau)
    cells = h[:, None] * _log_mean(values[:-1], values[1:])
    out = np.zeros_like(values)
    out[1:] = np.cumsum(cells, axis=0)
    return out


def _occupancy(net: Network, classes: ClassTable, tau: np.ndarray, q0: np.ndarray):
    """Forward march of q(t) and gamma(t) with the blocking clamp.

    gamma_ij(t) = lambda_ij while q_i(t) < K_i; when q would overshoot,
    gamma is clamped to the reflecting value K_i / sum_j mix_j E[D_j].
    """
    size, types = classes.lam.shape
    steps = len(tau)
    lam = classes.lam.reshape(-1)
    type_of = np.tile(np.arange(types), size)
    node_of = np.repeat(np.arange(size), types)
    k_cap = net.k_spaces[1:]
    mean_d = classes.mean_d
    totals = classes.lam.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        mix = np.where(totals[:, None] > 0, classes.lam / totals[:, None], 0.0)
        reflect = np.where(np.isfinite(k_cap), k_cap / (mix @ mean_d), np.inf)
    clamped = (mix * reflect[:, None]).reshape(-1)

    init_tail = np.stack([classes.initial_joint[j].parking_tail(tau) for j in range(types)], axis=1)
    q_init = q0.reshape(-1)[None, :] * init_tail[:, type_of]
    gamma = np.zeros((steps, size * types))
    q = np.zeros((steps, size * types))
    q[0] = q0.reshape(-1)
    gamma[0] = _gamma_at(q[0], lam, clamped, node_of, k_cap, size)
    h = np.diff(tau)
    for n in range(1, steps):
        tails = np.stack([classes.joint[j].parking_tail(tau[n] - tau[: n + 1]) for j in range(types)], axis=1)
        kern = tails[:, type_of]
        gamma[n] = lam
        for attempt in range(2):
            f = gamma[: n + 1] * kern
            q[n] = q_init[n] + (h[:n, None] * _log_mean(f[:-1], f[1:])).sum(axis=0)
            if attempt:
                break
            occupied = np.bincount(node_of, weights=q[n], minlength=size)
            over = occupied >= k_cap - 1e-12
            if not over.any():
                break
            gamma[n] = np.where(over[node_of], clamped, lam)
    shape = (steps, size, types)
    return q.reshape(shape), gamma.reshape(shape)


def _gamma_at(q_row, lam, clamped, node_of, k_cap, size):
    occupied = np.bincount(node_of, weights=q_row, minlength=size)
    return np.where((occupied >= k_cap - 1e-12)[node_of], clamped, lam)


def _z_map(classes: ClassTable, tau: np.ndarray, gamma: np.ndarray, service: np.ndarray, z0: np.ndarray) -> np.ndarray:
    """One application of the transient map for all classes."""
    steps, size, types = gamma.shape
    flat_gamma = gamma.reshape(steps, -1)
    flat_service = service.reshape(steps, -1)
    z0_flat = z0.reshape(-1)
    out = np.zeros_like(flat_gamma)
    h = np.diff(tau)
    rows_per_chunk = max(1, CHUNK_ENTRIES // max(steps, 1))
    for c in range(size * types):
        j = c % types
        joint = classes.joint[j]
        init = classes.initial_joint[j]
        if z0_flat[c] > 0:
            out[:, c] += z0_flat[c] * np.asarray(init.joint_tail(flat_service[:, c], tau), float)
        if not np.any(flat_gamma[:, c] > 0):
            continue
        for start in range(1, steps, rows_per_chunk):
            rows = np.arange(start, min(steps, start + rows_per_chunk))
            b = flat_service[rows, c][:, None] - flat_service[None, :, c]
            d = tau[rows][:, None] - tau[None, :]
            valid = d >= 0
            kern = np.asarray(joint.joint_tail(np.maximum(b, 0.0), np.maximum(d, 0.0)), float)
            f = np.where(valid, flat_gamma[None, :, c] * kern, 0.0)
            cells = _log_mean(f[:, :-1], f[:, 1:]) * h[None, :]
            cells = np.where(valid[:, 1:], cells, 0.0)
            out[rows, c] += cells.sum(axis=1)
    return out.reshape(steps, size, types)


def _rate_function(net: Network, classes: ClassTable, allocator, model: str) -> RateFn:
    if allocator is None:
        allocator = Allocator(net, classes, model)
    if isinstance(allocator, Allocator):
        return allocator.allocate_many
    return allocator


def picard_solve(
    net: Network,
    classes: ClassTable,
    init=None,
    horizon: float = 10.0,
    dt: float = 0.005,
    *,
    q0=None,
    allocator: Union[Allocator, RateFn, None] = None,
    model: str = "distflow",
    tol: float = PICARD_TOL,
    max_iter: int = PICARD_MAX_ITER,
) -> FluidTrajectory:
    """Transient fluid trajectory by Picard iteration.

    q and gamma do not depend on z and are computed once. The iteration
    starts from z = q, an upper bound, so a monotone allocator gives a
    monotonically decreasing sequence of iterates.
    """
    z0 = np.zeros((classes.node_count, classes.type_count)) if init is None else state_matrix(classes, init)
    if isinstance(init, StateZ) and init.q is not None and q0 is None:
        q0 = init.q
    q_start = z0 if q0 is None else state_matrix(classes, q0)
    if np.any(z0 > q_start + 1e-12):
        raise ParameterError("initial z cannot exceed initial q")

    refine = bool(np.any((z0 == 0) & (classes.lam > 0)))
    tau, out_idx = _time_grid(horizon, dt, refine)
    q, gamma = _occupancy(net, classes, tau, q_start)
    rate_fn = _rate_function(net, classes, allocator, model)

    z = q.copy()
    gap = math.inf
    for iteration in range(1, max_iter + 1):
        rates = np.asarray(rate_fn(z), float).reshape(z.shape)
        service = _cumulative(tau, rates.reshape(len(tau), -1)).reshape(z.shape)
        new_z = _z_map(classes, tau, gamma, service, z0)
        gap = float(np.max(np.abs(new_z - z)))
        z = new_z
        log.debug("picard.iteration", iteration=iteration, gap=gap)
        if gap < tol:
            break
    else:
        raise NonConvergenceError("Picard iteration hit the iteration cap", gap=gap, iterations=max_iter)

    log.info("picard.converged", iterations=iteration, gap=gap, nodes=len(tau))
    return FluidTrajectory(tau[out_idx], z[out_idx], q[out_idx], gamma[out_idx], service[out_idx],
                           "picard", iteration, gap)


# ---------------------------------------------------------------------------
# Exponential oracles


def _exponential_means(classes: ClassTable):
    joint = classes.joint[0]
    exp_exp = isinstance(joint, IndependentExp) or (
        isinstance(joint, Independent) and joint.b_law.kind == "exponential" and joint.d_law.kind == "exponential"
    )
    if not exp_exp:
        raise UnsupportedSettingError("the Markovian fluid needs independent exponential B and D")
    return joint.mean_b, joint.mean_d


def _require_markov(net: Network, classes: ClassTable) -> None:
    if classes.type_count != 1:
        raise UnsupportedSettingError("the Markovian fluid is stated for a single EV type")
    if np.any(np.isfinite(net.k_spaces[1:])):
        raise UnsupportedSettingError("the Markovian fluid needs unlimited parking (K = inf)")
    _exponential_means(classes)


def explicit_markov(net: Network, classes: ClassTable, init=None, horizon: float = 10.0, dt: float = 0.005,
                    *, q0=None) -> FluidTrajectory:
    """Closed-form trajectory for proportional fairness w = R on a line.

    Exact when z(0) is proportional to lambda (in particular z(0) = 0 or z*),
    where every node keeps the constant power Lambda*_i = lambda_i delta / sum_k R_k lambda_k.
    """
    if not net.is_line:
        raise UnsupportedTopologyError("the explicit Markovian solution needs a line network")
    _require_markov(net, classes)
    mean_b, mean_d = _exponential_means(classes)
    ratio = classes.weights[:, 0] / net.cum_r[1:]
    if not np.allclose(ratio, ratio[0], rtol=1e-12, atol=0.0):
        raise UnsupportedSettingError("the explicit solution needs weights proportional to path resistance")
    if not np.allclose(net.deltas[1:], net.deltas[1], rtol=1e-12, atol=0.0):
        raise UnsupportedSettingError("the explicit solution needs a uniform voltage headroom")
    if np.isfinite(classes.c_max[0]) or np.any(np.isfinite(net.m_cap[1:])):
        raise UnsupportedSettingError("the explicit solution excludes rate and node caps")

    lam = classes.lam[:, 0]
    delta = float(net.deltas[1])
    cum_r = net.cum_r[1:]
    load = float(cum_r @ lam)
    if load * mean_b <= delta:
        raise UnsupportedSettingError("the explicit solution needs overload: sum R lambda E[B] > delta")
    lam_star = lam * delta / load
    z_star = mean_d * (lam - lam_star / mean_b)

    z0 = np.zeros(net.node_count) if init is None else state_matrix(classes, init)[:, 0]
    q_start = z0 if q0 is None else state_matrix(classes, q0)[:, 0]
    if np.linalg.matrix_rank(np.vstack([z0, lam])) > 1:
        log.warning("fluid.explicit_approximate", note="z(0) is not proportional to lambda")
    t = np.arange(int(round(horizon / dt)) + 1) * dt
    decay = np.exp(-t / mean_d)[:, None]
    z = z_star[None, :] + (z0 - z_star)[None, :] * decay
    q = lam[None, :] * mean_d + (q_start - lam * mean_d)[None, :] * decay

    weighted_star = float(cum_r @ z_star)
    weighted_gap = float(cum_r @ (z0 - z_star))
    with np.errstate(divide="ignore"):
        per_ev = delta * mean_d / weighted_star * np.log(
            (weighted_star * np.exp(t / mean_d) + weighted_gap) / (weighted_star + weighted_gap)
        )
    service = np.repeat(per_ev[:, None], net.node_count, axis=1)
    gamma = np.repeat(lam[None, :], len(t), axis=0)
    return FluidTrajectory(t, z[..., None], q[..., None], gamma[..., None], service[..., None], "explicit")


def markov_invariant(net: Network, classes: ClassTable):
    """(Lambda*, z*) of the explicit Markovian solution."""
    lam = classes.lam[:, 0]
    mean_b, mean_d = _exponential_means(classes)
    delta = float(net.deltas[1])
    lam_star = lam * delta / float(net.cum_r[1:] @ lam)
    return lam_star, mean_d * (lam - lam_star / mean_b)


def markov_ode(net: Network, classes: ClassTable, init=None, horizon: float = 10.0, dt: float = 0.005,
               *, allocator: Union[Allocator, RateFn, None] = None, model: str = "distflow") -> FluidTrajectory:
    """RK4 integration of z' = lambda - z/E[D] - (z/E[B]) p(z) for exponential B and D."""
    _require_markov(net, classes)
    mean_b, mean_d = _exponential_means(classes)
    rate_fn = _rate_function(net, classes, allocator, model)
    lam = classes.lam

    def rates(z: np.ndarray) -> np.ndarray:
        return np.asarray(rate_fn(np.maximum(z, 0.0)[None]), float).reshape(z.shape)

    def drift(z: np.ndarray) -> np.ndarray:
        return lam - z / mean_d - z / mean_b * rates(z)

    steps = int(round(horizon / dt))
    t = np.arange(steps + 1) * dt
    z = np.zeros((steps + 1,) + lam.shape)
    z[0] = np.zeros(lam.shape) if init is None else state_matrix(classes, init)
    p = np.zeros_like(z)
    p[0] = rates(z[0])
    for n in range(steps):
        k1 = drift(z[n])
        k2 = drift(z[n] + 0.5 * dt * k1)
        k3 = drift(z[n] + 0.5 * dt * k2)
        k4 = drift(z[n] + dt * k3)
        z[n + 1] = np.maximum(z[n] + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
        p[n + 1] = rates(z[n + 1])
    decay = np.exp(-t / mean_d)[:, None, None]
    q = lam[None] * mean_d + (z[0] - lam * mean_d)[None] * decay
    service = integrate.cumulative_trapezoid(p, t, axis=0, initial=0.0)
    gamma = np.repeat(lam[None], len(t), axis=0)
    return FluidTrajectory(t, z, q, gamma, service, "markov-ode")


# ---------------------------------------------------------------------------
# Convergence to the invariant point


@dataclass(eq=False)
class StabilityReport:
    z_star: np.ndarray
    t: np.ndarray
    distances: List[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return np.array([d[-1] for d in self.distances])

    @property
    def monotone(self) -> List[bool]:
        return [bool(np.all(np.diff(d) <= 1e-9)) for d in self.distances]


def stability_check(
    net: Network,
    classes: ClassTable,
    inits: Optional[Sequence[np.ndarray]] = None,
    *,
    horizon: float = 12.0,
    dt: float = 0.005,
    model: str = "distflow",
    allocator: Union[Allocator, RateFn, None] = None,
) -> StabilityReport:
    """Sup-norm distance to z* along Picard trajectories from several starts."""
    if np.any(np.isfinite(net.k_spaces[1:])):
        raise PreconditionError("convergence to the invariant point is only asserted for K = inf")
    solve_model = "ac" if model == "ac" else "distflow"
    z_star = invariant_solve(net, classes, solve_model).z_star
    if inits is None:
        tilt = np.linspace(0.5, 1.5, classes.node_count)[:, None]
        inits = [np.zeros_like(z_star), 2.0 * z_star, tilt * z_star]
    if allocator is None:
        allocator = Allocator(net, classes, model)
    report = StabilityReport(z_star, np.zeros(0))
    for start in inits:
        start = state_matrix(classes, start)
        traj = picard_solve(net, classes, start, horizon, dt, allocator=allocator)
        report.t = traj.t
        report.distances.append(np.max(np.abs(traj.z - z_star[None]), axis=(1, 2)))
    log.info("fluid.stability", final=report.final.tolist())
    return report
