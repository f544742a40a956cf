"""
Utility weights for weighted proportional fairness in overload.

With weights w_i on a line, the invariant point charges node i at the
constant rate c_i / h with c_i = w_i / R_i, and the long-run number of
successful charges per unit time is sum_i gamma_i P(c_i D > h B). For a
ratio law B = H D the choice of c reduces to

* a 0-1 knapsack when H is deterministic (serve a node fully or not at all),
* a convex program in y_i = (kappa / (c_i + kappa))^(a-1) when H is Pareto,

and the Markov inequality turns the knapsack with H = 1 into a lower bound
for any H with E[H] = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import optimize

from evshare.errors import ParameterError, PreconditionError, SolverError, UnsupportedSettingError
from evshare.grid import Network, line_network
from evshare.log import get_logger
from evshare.stochastics import (
    ClassTable,
    DeterministicRatio,
    JointBD,
    Law,
    ParetoRatio,
    g_value,
    gamma_effective,
)

log = get_logger(__name__)

EXHAUSTIVE_LIMIT = 20
CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class WeightProblem:
    """Single-type line data; node i is entry i-1."""

    gamma: np.ndarray
    cum_r: np.ndarray
    mean_d: float
    delta: float
    ratio: JointBD

    def __post_init__(self):
        if not isinstance(self.ratio, (DeterministicRatio, ParetoRatio)):
            raise UnsupportedSettingError("weight design handles deterministic or Pareto ratio laws")
        object.__setattr__(self, "gamma", np.asarray(self.gamma, float))
        object.__setattr__(self, "cum_r", np.asarray(self.cum_r, float))

    @property
    def mean_h(self) -> float:
        if isinstance(self.ratio, DeterministicRatio):
            return self.ratio.theta
        return self.ratio.mean_h

    @property
    def demand(self) -> np.ndarray:
        """E[D] gamma_i R_i per node."""
        return self.mean_d * self.gamma * self.cum_r

    @property
    def overload(self) -> float:
        """sum E[B] gamma_i R_i / delta; above 1 in overload."""
        return float(self.demand.sum() * self.mean_h / self.delta)

    def require_overload(self) -> None:
        if not self.overload > 1.0:
            raise PreconditionError(f"no overload: sum E[B] gamma R / delta = {self.overload:.6g} <= 1")

    @classmethod
    def from_network(cls, net: Network, classes: ClassTable, ratio: Optional[JointBD] = None) -> "WeightProblem":
        if classes.type_count != 1:
            raise UnsupportedSettingError("weight design is single-type")
        if not net.is_line:
            raise UnsupportedSettingError("weight design works on a line network")
        joint = classes.joint[0] if ratio is None else ratio
        gamma = gamma_effective(net, classes)[:, 0]
        return cls(gamma, net.cum_r[1:], float(joint.mean_d), float(net.deltas[net.deepest]), joint)


@dataclass
class WeightSolution:
    w: np.ndarray
    c: np.ndarray
    objective: float
    slack: float
    kind: str
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    kkt_residual: float = 0.0


# ---------------------------------------------------------------------------
# Knapsack


def _lexicographic_key(mask: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(mask))


def knapsack_exhaustive(values: np.ndarray, sizes: np.ndarray, capacity: float) -> np.ndarray:
    """Optimal selection by enumeration; ties go to the lexicographically smallest index set."""
    values = np.asarray(values, float)
    sizes = np.asarray(sizes, float)
    n = len(values)
    if n > EXHAUSTIVE_LIMIT:
        raise ParameterError(f"exhaustive knapsack is limited to {EXHAUSTIVE_LIMIT} items")
    masks = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    fits = masks @ sizes <= capacity + CONSTRAINT_TOL
    worth = np.where(fits, masks @ values, -np.inf)
    best = worth.max()
    tied = masks[worth >= best - 1e-12 * max(1.0, abs(best))]
    return min(tied, key=_lexicographic_key)


def _frontier(front_v: np.ndarray, front_s: np.ndarray, value: float, size: float, limit: float):
    """Merge a frontier with its copy shifted by one item; drop dominated and oversized points.

    Points are kept sorted by size with strictly increasing value, so the
    best value within a size budget is the last point below it.
    """
    v = np.concatenate([front_v, front_v + value])
    s = np.concatenate([front_s, front_s + size])
    fits = s <= limit
    v, s = v[fits], s[fits]
    order = np.lexsort((-v, s))
    v, s = v[order], s[order]
    running = np.maximum.accumulate(v)
    keep = np.ones(len(v), dtype=bool)
    keep[1:] = v[1:] > running[:-1]
    return v[keep], s[keep]


def _best_within(front: Tuple[np.ndarray, np.ndarray], budget: float) -> float:
    values, sizes = front
    idx = int(np.searchsorted(sizes, budget, side="right")) - 1
    return float(values[idx]) if idx >= 0 else -np.inf


def knapsack_dp(values: np.ndarray, sizes: np.ndarray, capacity: float) -> np.ndarray:
    """Exact 0-1 knapsack by dynamic programming over (value, size) frontiers.

    For every suffix of items the frontier holds each reachable value with
    the least total size that attains it, dominated points removed. The
    optimum is read off the full frontier, and the selection is rebuilt
    front to back so that ties go to the lexicographically smallest index
    set, as in `knapsack_exhaustive`.
    """
    values = np.asarray(values, float)
    sizes = np.asarray(sizes, float)
    if np.any(sizes < 0):
        raise ParameterError("knapsack sizes must be nonnegative")
    n = len(values)
    limit = capacity + CONSTRAINT_TOL
    fronts = [None] * (n + 1)
    fronts[n] = (np.zeros(1), np.zeros(1))
    for i in range(n - 1, -1, -1):
        fronts[i] = _frontier(*fronts[i + 1], values[i], sizes[i], limit)
    best = float(fronts[0][0][-1])
    tie = 1e-12 * max(1.0, abs(best))

    chosen = np.zeros(n, dtype=bool)
    gained, room = 0.0, limit
    for i in range(n):
        if gained >= best - tie:
            break
        if sizes[i] <= room and gained + values[i] + _best_within(fronts[i + 1], room - sizes[i]) >= best - tie:
            chosen[i] = True
            gained += values[i]
            room -= sizes[i]
    return chosen


def knapsack(values: np.ndarray, sizes: np.ndarray, capacity: float) -> np.ndarray:
    if len(values) <= EXHAUSTIVE_LIMIT:
        return knapsack_exhaustive(values, sizes, capacity)
    return knapsack_dp(values, sizes, capacity)


def solve_deterministic_ratio(prob: WeightProblem) -> WeightSolution:
    """Serve the knapsack-selected nodes at c_i = H, switch the others off."""
    if not isinstance(prob.ratio, DeterministicRatio):
        raise UnsupportedSettingError("the knapsack needs a deterministic ratio H")
    prob.require_overload()
    theta = prob.ratio.theta
    sizes = prob.demand * theta
    chosen = knapsack(prob.gamma, sizes, prob.delta)
    c = np.where(chosen, theta, 0.0)
    objective = float(prob.gamma[chosen].sum())
    slack = prob.delta - float(sizes[chosen].sum())
    log.info("weights.knapsack", selected=_lexicographic_key(chosen), objective=objective)
    return WeightSolution(c * prob.cum_r, c, objective, slack, "knapsack", chosen)


def lower_bound_construction(prob: WeightProblem) -> WeightSolution:
    """Markov-inequality bound: the knapsack with H = 1 and capacity delta.

    For E[H] = 1 a node served at c_i > 1 uses at most E[D] gamma_i R_i of
    the headroom, and P(c_i D > B) >= 1 - 1/c_i. The bound is attained as
    c_i grows without limit on the selected nodes, so those report
    c_i = inf. The allocation only sees w up to a common factor, hence the
    finite weights w_i = R_i on the selected nodes realize that limit.
    """
    if abs(prob.mean_h - 1.0) > 1e-9:
        raise PreconditionError(f"the bound needs E[H] = 1, got {prob.mean_h:.6g}")
    sizes = prob.demand
    chosen = knapsack(prob.gamma, sizes, prob.delta)
    objective = float(prob.gamma[chosen].sum())
    c = np.where(chosen, np.inf, 0.0)
    w = np.where(chosen, prob.cum_r, 0.0)
    return WeightSolution(w, c, objective, prob.delta - float(sizes[chosen].sum()), "bound", chosen)


# ---------------------------------------------------------------------------
# Pareto ratio


def solve_pareto_ratio(prob: WeightProblem) -> WeightSolution:
    """Maximize sum gamma_i (1 - y_i^(a/(a-1))) s.t. sum k_i (1 - y_i) <= delta, y in [0, 1].

    k_i = E[D] kappa gamma_i R_i / (a - 1). Stationarity gives
    y_i(eta) = (eta k_i (a-1) / (a gamma_i))^(a-1) clipped to [0, 1], and the
    multiplier eta makes the constraint tight.
    """
    if not isinstance(prob.ratio, ParetoRatio):
        raise UnsupportedSettingError("the convex program needs a Pareto ratio H")
    prob.require_overload()
    a, kappa = prob.ratio.a, prob.ratio.kappa
    k = prob.demand * kappa / (a - 1.0)
    active = prob.gamma > 0

    def y_of(eta: float) -> np.ndarray:
        y = np.ones_like(k)
        base = eta * k[active] * (a - 1.0) / (a * prob.gamma[active])
        y[active] = np.clip(base ** (a - 1.0), 0.0, 1.0)
        return y

    def excess(eta: float) -> float:
        return float(k @ (1.0 - y_of(eta))) - prob.delta

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise SolverError("no bracket for the Pareto multiplier")
    lo = hi / 2.0
    while excess(lo) <= 0:
        lo /= 2.0
        if lo < 1e-300:
            raise SolverError("no bracket for the Pareto multiplier")
    try:
        eta = optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=1e-14, maxiter=500)
    except (ValueError, RuntimeError) as exc:
        raise SolverError(f"Pareto multiplier search failed on [{lo:.3e}, {hi:.3e}]: {exc}") from exc

    y = y_of(eta)
    with np.errstate(divide="ignore"):
        c = np.where(y > 0, kappa * y ** (-1.0 / (a - 1.0)) - kappa, np.inf)
    objective = float(prob.gamma @ (1.0 - y ** (a / (a - 1.0))))
    interior = active & (y > 0) & (y < 1)
    residual = prob.gamma[interior] * a / (a - 1.0) * y[interior] ** (1.0 / (a - 1.0)) - eta * k[interior]
    kkt = float(np.max(np.abs(residual), initial=0.0))
    slack = -excess(eta)
    log.info("weights.pareto", eta=eta, objective=objective, kkt=kkt)
    return WeightSolution(c * prob.cum_r, c, objective, slack, "convex", y < 1, kkt)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class WeightEvaluation:
    h: float
    lam_star: np.ndarray
    z_star: np.ndarray
    p_star: np.ndarray
    success_rate: float
    constraint: float
    cross_check_gap: Optional[float] = None


def evaluate_weights(net: Network, classes: ClassTable, w, *, cross_check: bool = False) -> WeightEvaluation:
    """Invariant point of the w-weighted line and its long-run success rate.

    h solves delta = sum R_i g_i(w_i / (h R_i)); h = 0 means the voltage
    constraint is slack with every weighted node charged without limit.
    """
    weights = np.asarray(w, float).ravel()
    if weights.shape != (net.node_count,) or np.any(weights < 0):
        raise ParameterError("need one nonnegative weight per node")
    if not np.any(weights > 0):
        raise ParameterError("all weights are zero; h cannot be normalized")
    if classes.type_count != 1 or not net.is_line:
        raise UnsupportedSettingError("weight evaluation is single-type on a line")
    joint = classes.joint[0]
    gamma = gamma_effective(net, classes)[:, 0]
    cum_r = net.cum_r[1:]
    delta = float(net.deltas[net.deepest])
    served = weights > 0

    def node_power(h: float) -> np.ndarray:
        out = np.zeros_like(weights)
        with np.errstate(divide="ignore"):
            rate = np.where(served, weights / (h * cum_r), 0.0)
        for i in np.flatnonzero(served):
            out[i] = gamma[i] * joint.mean_b if math.isinf(rate[i]) else g_value(gamma[i], joint, rate[i])
        return out

    def excess(log_h: float) -> float:
        return float(cum_r @ node_power(math.exp(log_h))) - delta

    saturated = float(cum_r[served] @ (gamma[served] * joint.mean_b))
    if saturated <= delta + CONSTRAINT_TOL:
        h = 0.0
    else:
        lo, hi = -1.0, 1.0
        while excess(lo) <= 0:
            lo -= 2.0
            if lo < -700:
                h = 0.0
                break
        else:
            while excess(hi) > 0:
                hi += 2.0
                if hi > 700:
                    raise SolverError("no bracket for the voltage multiplier h")
            h = math.exp(optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500))

    if h > 0:
        lam = node_power(h)
        p = np.where(served, weights / (h * cum_r), 0.0)
    else:
        lam = np.where(served, gamma * joint.mean_b, 0.0)
        p = np.where(served, np.inf, 0.0)
    success = np.array([float(joint.success_prob(p[i])) if served[i] else 0.0 for i in range(len(p))])
    z = np.array([gamma[i] * joint.mean_sojourn(p[i]) if served[i] else gamma[i] * joint.mean_d
                  for i in range(len(p))])
    evaluation = WeightEvaluation(h, lam, z, p, float(gamma @ success), float(cum_r @ lam))

    if cross_check and np.all(served):
        from evshare.fluid import invariant_solve

        point = invariant_solve(net, classes.with_weights(weights[:, None]), "distflow")
        evaluation.cross_check_gap = float(np.max(np.abs(point.lam_star[:, 0] - lam)))
        log.info("weights.cross_check", gap=evaluation.cross_check_gap)
    return evaluation


# ---------------------------------------------------------------------------
# Instance generator


def overload_line_instance(
    nodes: int = 10,
    overload: float = 1.17,
    *,
    r: float = 0.001,
    ratio: Union[str, JointBD] = "deterministic",
    a: float = 2.0,
    mean_d: float = 1.0,
    voltage_drop_pct: float = 0.1,
) -> Tuple[Network, ClassTable]:
    """Equal-segment line with equal arrivals scaled to the requested overload; E[H] = 1."""
    if overload <= 0:
        raise ParameterError("overload must be positive")
    net = line_network([r] * nodes, voltage_drop_pct=voltage_drop_pct)
    d_law = Law("exponential", mean_d)
    if isinstance(ratio, JointBD):
        joint = ratio
    elif ratio == "deterministic":
        joint = DeterministicRatio(1.0, d_law)
    elif ratio == "pareto":
        joint = ParetoRatio(a, a - 1.0, d_law)
    else:
        raise ParameterError(f"unknown ratio law {ratio!r}")
    delta = float(net.deltas[net.deepest])
    per_node = overload * delta / (joint.mean_b * float(net.cum_r[1:].sum()))
    classes = ClassTable.build(net, np.full(nodes, per_node), joint, weighting="resistance")
    return net, classes
