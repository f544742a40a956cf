"""
Experiment configuration: a JSON document validated with pydantic and
turned into a Network and a ClassTable.

Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from evshare.errors import ConfigError, ParameterError, UnsupportedSettingError
from evshare.grid import Network, line_network, load_network, synthetic_tree
from evshare.stochastics import (
    ClassTable,
    DeterministicRatio,
    DiscreteRatio,
    Empirical,
    Independent,
    IndependentExp,
    JointBD,
    Law,
    ParetoRatio,
)

MODEL_NAMES = ("distflow", "ac", "closed-form")
PositiveFloat = Annotated[float, Field(gt=0)]
NonNegativeFloat = Annotated[float, Field(ge=0)]


class _Spec(BaseModel):
    # c_max defaults to inf; keep it a float through dumps and the manifest
    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")


# ---------------------------------------------------------------------------
# Laws


class LawSpec(_Spec):
    kind: Literal["exponential", "deterministic", "infinite"] = "exponential"
    mean: PositiveFloat = 1.0

    def build(self) -> Law:
        return Law(self.kind, self.mean)


class IndependentExpSpec(_Spec):
    family: Literal["independent-exp"]
    mean_b: PositiveFloat = 1.0
    mean_d: PositiveFloat = 1.0

    def build(self, base: Path) -> JointBD:
        return IndependentExp(self.mean_b, self.mean_d)


class IndependentSpec(_Spec):
    family: Literal["independent"]
    b: LawSpec = LawSpec()
    d: LawSpec = LawSpec()

    def build(self, base: Path) -> JointBD:
        return Independent(self.b.build(), self.d.build())


class DeterministicRatioSpec(_Spec):
    family: Literal["deterministic-ratio"]
    theta: PositiveFloat
    d: LawSpec = LawSpec()

    def build(self, base: Path) -> JointBD:
        return DeterministicRatio(self.theta, self.d.build())


class DiscreteRatioSpec(_Spec):
    family: Literal["discrete-ratio"]
    thetas: List[PositiveFloat]
    probs: List[NonNegativeFloat]
    d: LawSpec = LawSpec()

    def build(self, base: Path) -> JointBD:
        return DiscreteRatio(tuple(self.thetas), tuple(self.probs), self.d.build())


class ParetoRatioSpec(_Spec):
    family: Literal["pareto-ratio"]
    a: Annotated[float, Field(gt=1)]
    kappa: PositiveFloat
    d: LawSpec = LawSpec()

    def build(self, base: Path) -> JointBD:
        return ParetoRatio(self.a, self.kappa, self.d.build())


class EmpiricalSpec(_Spec):
    family: Literal["empirical"]
    b: Optional[List[NonNegativeFloat]] = None
    d: Optional[List[NonNegativeFloat]] = None
    file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.b is None or self.d is None):
            raise ValueError("give either inline b and d samples or a CSV file with columns b,d")
        return self

    def build(self, base: Path) -> JointBD:
        if self.file is None:
            return Empirical(np.array(self.b), np.array(self.d))
        path = _resolve(base, self.file)
        if not path.is_file():
            raise ConfigError(f"empirical sample file not found: {path}")
        frame = pd.read_csv(path, comment="#")
        missing = {"b", "d"} - set(frame.columns)
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        return Empirical(frame["b"].to_numpy(float), frame["d"].to_numpy(float))


JointSpec = Annotated[
    Union[IndependentExpSpec, IndependentSpec, DeterministicRatioSpec, DiscreteRatioSpec, ParetoRatioSpec, EmpiricalSpec],
    Field(discriminator="family"),
]


# ---------------------------------------------------------------------------
# Sections


class LineGeneratorSpec(_Spec):
    kind: Literal["line"]
    r: List[PositiveFloat]
    x: Optional[List[NonNegativeFloat]] = None


class TreeGeneratorSpec(_Spec):
    kind: Literal["synthetic-tree"]
    buses: Annotated[int, Field(ge=2)] = 47
    seed: int = 0
    r_range: Tuple[PositiveFloat, PositiveFloat] = (0.001, 0.01)
    x_over_r: NonNegativeFloat = 1.0
    k_spaces: PositiveFloat = 1.0
    m_cap: PositiveFloat = 8.0


class NetworkSpec(_Spec):
    file: Optional[str] = None
    generator: Optional[Annotated[Union[LineGeneratorSpec, TreeGeneratorSpec], Field(discriminator="kind")]] = None
    w00: PositiveFloat = 1.0
    v_lo: Optional[Union[PositiveFloat, List[PositiveFloat]]] = None
    v_hi: Optional[Union[PositiveFloat, List[PositiveFloat]]] = None
    voltage_drop_pct: Optional[Annotated[float, Field(ge=0, lt=1)]] = None
    exclude: List[int] = []
    k_spaces: Optional[Union[PositiveFloat, List[PositiveFloat]]] = None
    m_cap: Optional[Union[PositiveFloat, List[PositiveFloat]]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.generator is None):
            raise ValueError("give exactly one of network.file or network.generator")
        if self.exclude and self.file is None:
            raise ValueError("exclude applies to network files only")
        return self


class TypeSpec(_Spec):
    name: str = "ev"
    c_max: PositiveFloat = math.inf
    joint: JointSpec


class UtilitySpec(_Spec):
    form: Literal["log", "power"] = "log"
    alpha: PositiveFloat = 0.5
    weights: Union[Literal["uniform", "resistance"], List[List[PositiveFloat]]] = "uniform"


class ClassesSpec(_Spec):
    matrix: Optional[List[List[NonNegativeFloat]]] = None
    per_node: Optional[Union[NonNegativeFloat, List[NonNegativeFloat]]] = None
    split: Optional[List[NonNegativeFloat]] = None
    types: Annotated[List[TypeSpec], Field(min_length=1)]
    utility: UtilitySpec = UtilitySpec()
    initial_joint: Optional[List[JointSpec]] = None

    @model_validator(mode="after")
    def _arrivals(self):
        if (self.matrix is None) == (self.per_node is None):
            raise ValueError("give exactly one of classes.matrix or classes.per_node")
        if self.split is not None and len(self.split) != len(self.types):
            raise ValueError(f"split has {len(self.split)} entries for {len(self.types)} types")
        if self.initial_joint is not None and len(self.initial_joint) != len(self.types):
            raise ValueError("initial_joint needs one law per type")
        return self


class RunSpec(_Spec):
    horizon: PositiveFloat = 2000.0
    warmup: Optional[NonNegativeFloat] = None
    seed: Annotated[int, Field(ge=0)] = 0
    replications: Annotated[int, Field(ge=1)] = 1
    dt: Optional[PositiveFloat] = None
    fluid_horizon: PositiveFloat = 10.0
    state_distribution: bool = False
    truncation: Optional[Annotated[int, Field(ge=0)]] = None
    event_log: bool = False


class ExperimentConfig(_Spec):
    network: NetworkSpec
    classes: ClassesSpec
    model: Literal["distflow", "ac", "closed-form"] = "distflow"
    run: RunSpec = RunSpec()
    output_dir: str = "results"
    time_varying: Optional[Any] = None

    _base: Path = PrivateAttr(default_factory=Path.cwd)

    @field_validator("time_varying")
    @classmethod
    def _static_only(cls, value):
        if value is not None:
            raise ValueError("time-varying arrival rates are not implemented")
        return value

    @classmethod
    def from_dict(cls, data: dict, base_dir: Union[str, Path, None] = None) -> "ExperimentConfig":
        try:
            config = cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(_describe(exc)) from None
        config._base = Path(base_dir) if base_dir is not None else Path.cwd()
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, path.parent)

    @property
    def base_dir(self) -> Path:
        return self._base

    def updated(self, **changes: Any) -> "ExperimentConfig":
        """Copy with top-level or `run` fields replaced (CLI overrides)."""
        run_changes = {k: v for k, v in changes.items() if k in RunSpec.model_fields and v is not None}
        top = {k: v for k, v in changes.items() if k in type(self).model_fields and v is not None}
        if run_changes:
            top["run"] = self.run.model_copy(update=run_changes)
        config = self.model_copy(update=top)
        config._base = self._base
        return config

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # -- builders ----------------------------------------------------------

    def build_network(self) -> Network:
        spec = self.network
        bounds = dict(w00=spec.w00, v_lo=spec.v_lo, v_hi=spec.v_hi, voltage_drop_pct=spec.voltage_drop_pct)
        if spec.file is not None:
            net = load_network(_resolve(self._base, spec.file), exclude=spec.exclude, **bounds)
        elif isinstance(spec.generator, LineGeneratorSpec):
            net = line_network(spec.generator.r, spec.generator.x, **bounds)
        else:
            gen = spec.generator
            net = synthetic_tree(gen.buses, gen.seed, w00=spec.w00,
                                 voltage_drop_pct=0.1 if spec.voltage_drop_pct is None else spec.voltage_drop_pct,
                                 r_range=gen.r_range, x_over_r=gen.x_over_r, k_spaces=gen.k_spaces, m_cap=gen.m_cap)
        overrides = {}
        if spec.k_spaces is not None:
            overrides["k_spaces"] = _node_array(net, spec.k_spaces, 0.0, "k_spaces")
        if spec.m_cap is not None:
            overrides["m_cap"] = _node_array(net, spec.m_cap, math.inf, "m_cap")
        return dataclasses.replace(net, **overrides) if overrides else net

    def build_classes(self, net: Network) -> ClassTable:
        spec = self.classes
        types = len(spec.types)
        if spec.matrix is not None:
            lam = np.asarray(spec.matrix, float)
        else:
            per_node = np.broadcast_to(np.asarray(spec.per_node, float), (net.node_count,))
            split = np.full(types, 1.0 / types) if spec.split is None else np.asarray(spec.split, float)
            if not math.isclose(split.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
                raise ConfigError(f"classes.split must sum to 1, got {split.sum()}")
            lam = per_node[:, None] * split[None, :]
        if lam.shape != (net.node_count, types):
            raise ConfigError(f"classes.matrix has shape {lam.shape}, expected {(net.node_count, types)}")
        joints = [t.joint.build(self._base) for t in spec.types]
        initial = [j.build(self._base) for j in spec.initial_joint] if spec.initial_joint else ()
        weighting = spec.utility.weights
        if not isinstance(weighting, str):
            weighting = np.asarray(weighting, float)
        return ClassTable.build(net, lam, joints, c_max=[t.c_max for t in spec.types], weighting=weighting,
                                form=spec.utility.form, alpha=spec.utility.alpha, initial_joint=initial)

    def build(self) -> Tuple[Network, ClassTable]:
        """Network and class table with model preconditions checked."""
        net = self.build_network()
        classes = self.build_classes(net)
        check_model(self.model, net, classes)
        return net, classes


def check_model(model: str, net: Network, classes: ClassTable) -> None:
    if model != "closed-form":
        return
    if not net.is_line:
        raise UnsupportedSettingError("model closed-form requires a line network")
    if classes.form != "log":
        raise UnsupportedSettingError("model closed-form requires logarithmic utilities")
    if not np.allclose(net.v_lo[1:], net.v_lo[1]):
        raise UnsupportedSettingError("model closed-form requires a uniform lower voltage bound")
    if np.any(np.isfinite(classes.c_max)) or np.any(np.isfinite(net.m_cap[1:])):
        raise UnsupportedSettingError("model closed-form excludes finite c_max and node caps")


def _resolve(base: Path, name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() else base / path


def _node_array(net: Network, value, root: float, name: str) -> np.ndarray:
    arr = np.asarray(value, float)
    if arr.ndim == 0:
        arr = np.full(net.node_count, float(arr))
    if arr.shape != (net.node_count,):
        raise ParameterError(f"network.{name} needs {net.node_count} entries, got {arr.shape[0]}")
    return np.concatenate([[root], arr])


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)
