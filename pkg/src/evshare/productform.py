"""
Stationary law of the line network under proportional fairness.

With equal log-utilities the allocation p_i = delta / (R_i sum(z)) turns
the line into a multiclass processor-sharing queue, whose stationary law is

    P(n) = (1 - rho) (sum n)! prod rho_i^n_i / n_i!,   rho_i = lambda_i E[B] R_i / delta,

provided rho = sum rho_i < 1. The law depends on B only through its mean.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from evshare.errors import (
    ParameterError,
    SimulationError,
    StabilityError,
    UnsupportedSettingError,
    UnsupportedTopologyError,
)
from evshare.grid import Network
from evshare.log import get_logger
from evshare.simulator import simulate, state_distribution, total_variation
from evshare.stochastics import ClassTable, Independent, Law

log = get_logger(__name__)

MASS_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class PsLoads:
    rho: np.ndarray
    delta: float
    mean_b: float

    @property
    def rho_total(self) -> float:
        return float(self.rho.sum())

    @property
    def stable(self) -> bool:
        return self.rho_total < 1.0

    @property
    def node_count(self) -> int:
        return len(self.rho)

    def require_stable(self) -> None:
        if not self.stable:
            raise StabilityError(f"rho = {self.rho_total:.6g} >= 1: no stationary distribution")


def ps_loads(net: Network, classes: ClassTable) -> PsLoads:
    """Per-node loads rho_i on a line with a single EV type."""
    if not net.is_line:
        raise UnsupportedTopologyError("the product form is stated for line networks")
    if classes.type_count != 1:
        raise UnsupportedSettingError("the product form is stated for a single EV type")
    mean_b = float(classes.joint[0].mean_b)
    delta = float(net.deltas[net.deepest])
    rho = classes.lam[:, 0] * mean_b * net.cum_r[1:] / delta
    return PsLoads(rho, delta, mean_b)


def stationary_probability(loads: PsLoads, n: Sequence[int]) -> float:
    loads.require_stable()
    counts = np.asarray(n, dtype=np.int64)
    if counts.shape != loads.rho.shape or np.any(counts < 0):
        raise ParameterError(f"need {loads.node_count} nonnegative counts, got {list(n)}")
    positive = counts > 0
    if np.any(loads.rho[positive] == 0):
        return 0.0
    log_p = (
        math.log1p(-loads.rho_total)
        + special.gammaln(counts.sum() + 1)
        + float(np.sum(counts[positive] * np.log(loads.rho[positive])))
        - float(np.sum(special.gammaln(counts + 1)))
    )
    return math.exp(log_p)


def total_count_marginal(loads: PsLoads, m: int) -> float:
    """P(sum n = m) = (1 - rho) rho^m."""
    loads.require_stable()
    return (1.0 - loads.rho_total) * loads.rho_total ** m


def mean_occupancy(loads: PsLoads) -> np.ndarray:
    """E[Z_i] = rho_i / (1 - rho)."""
    loads.require_stable()
    return loads.rho / (1.0 - loads.rho_total)


def truncation_level(loads: PsLoads, mass: float = MASS_FLOOR) -> int:
    """Smallest m with P(sum n > m) = rho^(m+1) below `mass`."""
    loads.require_stable()
    rho = loads.rho_total
    if rho == 0:
        return 0
    return max(0, int(math.ceil(math.log(mass) / math.log(rho))) - 1)


def _compositions(total: int, parts: int):
    for cuts in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        out = []
        for c in cuts:
            out.append(c - prev - 1)
            prev = c
        out.append(total + parts - 2 - prev)
        yield tuple(out)


def product_form_table(loads: PsLoads, max_total: Optional[int] = None, mass: float = MASS_FLOOR) -> Dict[Tuple[int, ...], float]:
    """Probabilities of every state with sum n <= max_total and mass >= `mass`."""
    loads.require_stable()
    top = truncation_level(loads, mass) if max_total is None else max_total
    table = {}
    for total in range(top + 1):
        for n in _compositions(total, loads.node_count):
            p = stationary_probability(loads, n)
            if p >= mass or total == 0:
                table[n] = p
    return table


def top_states(loads: PsLoads, k: int = 10) -> List[Tuple[Tuple[int, ...], float]]:
    table = product_form_table(loads)
    return sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


@dataclass
class ProductFormCheck:
    loads: PsLoads
    tv: Dict[str, float] = field(default_factory=dict)
    distributions: Dict[str, Dict[Tuple[int, ...], float]] = field(default_factory=dict)
    max_occupancy: Dict[str, int] = field(default_factory=dict)


def _tv_to_formula(loads: PsLoads, empirical: Dict[Tuple[int, ...], float]) -> float:
    """TV distance on visited plus formula states, the formula remainder lumped."""
    formula = product_form_table(loads)
    for key in empirical:
        if key not in formula:
            formula[key] = stationary_probability(loads, key)
    lumped = max(0.0, 1.0 - sum(formula.values()))
    return total_variation(empirical, formula) + 0.5 * lumped


def validate_against_simulation(
    net: Network,
    classes: ClassTable,
    horizon: float = 1e5,
    seed: int = 0,
    *,
    b_kinds: Sequence[str] = ("exponential", "deterministic"),
    warmup: Optional[float] = None,
) -> ProductFormCheck:
    """Simulate the processor-sharing line for each law of B with the same mean.

    EVs have no deadline and leave once charged. Unlimited parking is
    realized as K = ceil(50 / (1 - rho)); any blocking is an error.
    """
    loads = ps_loads(net, classes)
    loads.require_stable()
    spaces = math.ceil(50.0 / (1.0 - loads.rho_total))
    sim_net = dataclasses.replace(
        net,
        k_spaces=np.concatenate([[0.0], np.full(net.node_count, float(spaces))]),
        m_cap=np.full(net.node_count + 1, math.inf),
    )
    check = ProductFormCheck(loads)
    for kind in b_kinds:
        joint = Independent(Law(kind, loads.mean_b), Law("infinite"))
        ps_classes = ClassTable.build(sim_net, classes.lam[:, 0], joint, weighting="uniform")
        metrics = simulate(sim_net, ps_classes, horizon, warmup, seed, "closed-form", state_distribution=True)
        if metrics.counters.blocked.sum() > 0:
            raise SimulationError(f"blocking occurred with K = {spaces}; the run is not an unlimited-parking run")
        empirical = state_distribution(metrics)
        check.distributions[kind] = empirical
        check.max_occupancy[kind] = max((sum(k) for k in empirical), default=0)
        check.tv[kind] = _tv_to_formula(loads, empirical)
        log.info("productform.validate", law=kind, tv=check.tv[kind], rho=loads.rho_total)
    return check
