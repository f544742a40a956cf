"""
Named case-study presets run through the fluid invariant point.

All presets use proportional fairness, c_max = 1, a 10% voltage band and
the packaged 47-bus feeder (K = 1, M = 8) unless another network file is
given. Every configuration of a preset is validated before any compute.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from evshare.config import ExperimentConfig
from evshare.errors import ConfigError
from evshare.fluid import aggregate_success, invariant_solve
from evshare.log import get_logger

log = get_logger(__name__)

SWEEP_LAMBDAS = (10.0, 20.0, 30.0, 40.0, 50.0)
SWEEP_DEP_RATES = (0.25, 0.5, 1.0, 2.0, 4.0)


def packaged_networks() -> Path:
    return Path(str(resources.files("evshare") / "templates" / "networks"))


def _network_section(network: Optional[Path]) -> Tuple[dict, Path]:
    path = packaged_networks() / "synthetic_47bus.csv" if network is None else Path(network).resolve()
    return {"file": path.name, "voltage_drop_pct": 0.1}, path.parent


def _exp(mean: float) -> dict:
    return {"kind": "exponential", "mean": mean}


def two_type_config(network: Optional[Path] = None, model: str = "distflow") -> ExperimentConfig:
    """Two ratio types, theta = 0.02 and 0.01, sharing lambda = 1.2 per node as 40/60."""
    section, base = _network_section(network)
    data = {
        "network": section,
        "classes": {
            "per_node": 1.2,
            "split": [0.4, 0.6],
            "types": [
                {"name": "theta-0.02", "c_max": 1.0,
                 "joint": {"family": "deterministic-ratio", "theta": 0.02, "d": _exp(1.0)}},
                {"name": "theta-0.01", "c_max": 1.0,
                 "joint": {"family": "deterministic-ratio", "theta": 0.01, "d": _exp(1.0)}},
            ],
        },
        "model": model,
    }
    return ExperimentConfig.from_dict(data, base)


def discrete_ratio_config(network: Optional[Path] = None, model: str = "distflow") -> ExperimentConfig:
    """Single type with B = Theta D, Theta in {0.001, 0.02} w.p. {0.1, 0.9}."""
    section, base = _network_section(network)
    data = {
        "network": section,
        "classes": {
            "per_node": 1.2,
            "types": [{"name": "ev", "c_max": 1.0,
                       "joint": {"family": "discrete-ratio", "thetas": [0.001, 0.02], "probs": [0.1, 0.9],
                                 "d": _exp(1.0)}}],
        },
        "model": model,
    }
    return ExperimentConfig.from_dict(data, base)


def markov_config(total_lambda: float, dep_rate: float, node_count: int, network: Optional[Path] = None,
                  model: str = "distflow", mean_b: float = 1.0) -> ExperimentConfig:
    """Exponential B and D; arrivals pick a node uniformly."""
    if dep_rate <= 0 or total_lambda < 0:
        raise ConfigError("the sweep needs lambda >= 0 and a positive departure rate")
    section, base = _network_section(network)
    data = {
        "network": section,
        "classes": {
            "per_node": total_lambda / node_count,
            "types": [{"name": "ev", "c_max": 1.0,
                       "joint": {"family": "independent-exp", "mean_b": mean_b, "mean_d": 1.0 / dep_rate}}],
        },
        "model": model,
    }
    return ExperimentConfig.from_dict(data, base)


def _labels(net) -> np.ndarray:
    return np.asarray(net.labels)[1:] if net.labels else np.arange(1, net.node_count + 1)


def run_two_type(network: Optional[Path] = None, model: str = "distflow") -> Dict[str, pd.DataFrame]:
    config = two_type_config(network, model)
    net, classes = config.build()
    point = invariant_solve(net, classes, model)
    thetas = np.array([joint.theta for joint in classes.joint])
    ratio = point.p_star / thetas[None, :]
    nodes, types = ratio.shape
    frame = pd.DataFrame({
        "node": np.repeat(_labels(net), types),
        "type": np.tile(np.arange(types), nodes),
        "p_over_theta": ratio.ravel(),
    })
    log.info("scenario.two_type", mean_ratio=ratio.mean(axis=0).tolist())
    return {"case_two_type.csv": frame}


def run_discrete_ratio(network: Optional[Path] = None, model: str = "distflow") -> Dict[str, pd.DataFrame]:
    config = discrete_ratio_config(network, model)
    net, classes = config.build()
    point = invariant_solve(net, classes, model)
    joint = classes.joint[0]
    mean_theta = float(np.dot(joint.thetas, joint.probs))
    per_node = pd.DataFrame({
        "node": _labels(net),
        "lam_over_mean_theta": point.lam_star[:, 0] / mean_theta,
    })
    summary = pd.DataFrame({"agg_success": [aggregate_success(point)]})
    log.info("scenario.discrete_ratio", agg_success=summary["agg_success"][0])
    return {"case_discrete_ratio.csv": per_node, "case_discrete_ratio_success.csv": summary}


def run_markov_sweep(
    network: Optional[Path] = None,
    model: str = "distflow",
    lambdas: Sequence[float] = SWEEP_LAMBDAS,
    dep_rates: Sequence[float] = SWEEP_DEP_RATES,
) -> Dict[str, pd.DataFrame]:
    """Aggregated success over a (lambda, 1/E[D]) grid plus per-node success at the middle point."""
    base_net = markov_config(1.0, 1.0, 1, network, model).build_network()
    grid = [(lam, rate) for lam in lambdas for rate in dep_rates]
    built = []
    for lam, rate in grid:
        built.append(markov_config(lam, rate, base_net.node_count, network, model).build())
    rows: List[dict] = []
    middle = (lambdas[len(lambdas) // 2], dep_rates[len(dep_rates) // 2])
    node_frame = None
    for (lam, rate), (net, classes) in zip(grid, built):
        point = invariant_solve(net, classes, model)
        rows.append({"lambda": lam, "dep_rate": rate, "agg_success": aggregate_success(point)})
        if (lam, rate) == middle:
            node_frame = pd.DataFrame({"node": _labels(net), "success": point.success_prob[:, 0]})
        log.debug("scenario.sweep_point", lam=lam, dep_rate=rate, agg_success=rows[-1]["agg_success"])
    return {
        "case_markov_sweep.csv": pd.DataFrame(rows, columns=["lambda", "dep_rate", "agg_success"]),
        "case_markov_nodes.csv": node_frame,
    }


SCENARIOS: Dict[str, Callable[..., Dict[str, pd.DataFrame]]] = {
    "case-two-type": run_two_type,
    "case-discrete-ratio": run_discrete_ratio,
    "case-markov-sweep": run_markov_sweep,
}


def preset_config(name: str, network: Optional[Path] = None, model: str = "distflow") -> ExperimentConfig:
    """The configuration recorded in the manifest of a scenario run."""
    if name == "case-two-type":
        return two_type_config(network, model)
    if name == "case-discrete-ratio":
        return discrete_ratio_config(network, model)
    if name == "case-markov-sweep":
        nodes = markov_config(1.0, 1.0, 1, network, model).build_network().node_count
        return markov_config(SWEEP_LAMBDAS[len(SWEEP_LAMBDAS) // 2], SWEEP_DEP_RATES[len(SWEEP_DEP_RATES) // 2],
                             nodes, network, model)
    raise ConfigError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}")


def run_scenario(name: str, network: Optional[Path] = None, model: str = "distflow") -> Dict[str, pd.DataFrame]:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}")
    if model not in ("distflow", "ac"):
        raise ConfigError("scenarios solve the invariant point with the distflow or ac model")
    return SCENARIOS[name](network, model)
