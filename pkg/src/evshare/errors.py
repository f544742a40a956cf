"""Exception hierarchy shared by every evshare module."""

from __future__ import annotations

from typing import Optional, Sequence


class EvShareError(Exception):
    """Base class for all evshare failures."""

    exit_code = 1


class ConfigError(EvShareError):
    """Invalid configuration document or input file."""

    exit_code = 2


class NetworkFormatError(ConfigError):
    """Malformed network CSV; carries the offending line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class TopologyError(ConfigError):
    """Parent pointers do not form a tree rooted at node 0."""

    def __init__(self, message: str, nodes: Sequence[int] = ()):
        self.nodes = tuple(nodes)
        super().__init__(message)


class ParameterError(ConfigError):
    """A physical or distributional parameter is out of its domain."""


class RangeError(EvShareError):
    """Argument outside the strictly increasing range of a g-transform."""


class InfeasibleLoadError(EvShareError):
    """The requested load cannot be delivered (no real voltage solution)."""


class NonConvergenceError(EvShareError):
    """An iteration hit its cap; `gap` holds the last successive difference."""

    def __init__(self, message: str, gap: float = float("nan"), iterations: int = 0):
        self.gap = gap
        self.iterations = iterations
        super().__init__(f"{message} (gap={gap:.3e}, iterations={iterations})")


class DominationError(EvShareError):
    """Distflow voltages fail to dominate the AC voltages."""

    def __init__(self, message: str, nodes: Sequence[int] = ()):
        self.nodes = tuple(nodes)
        super().__init__(f"{message}: nodes {list(self.nodes)}")


class UnsupportedSettingError(EvShareError):
    """A closed form was requested outside its hypotheses."""


class UnsupportedTopologyError(UnsupportedSettingError):
    """A closed form needs a line network."""


class PreconditionError(EvShareError):
    """A modelling precondition (support, overload, single type) fails."""


class StabilityError(EvShareError):
    """Processor-sharing load rho >= 1."""


class SolverError(EvShareError):
    """Numerical solver failure or failed feasibility certification."""


class SimulationError(EvShareError):
    """Failure inside the event loop; `time` is the simulated clock."""

    def __init__(self, message: str, time: Optional[float] = None):
        self.time = time
        prefix = f"t={time:.6g}: " if time is not None else ""
        super().__init__(f"{prefix}{message}")


class WidenTruncationError(SimulationError):
    """The empirical state table exceeded its truncation level."""
