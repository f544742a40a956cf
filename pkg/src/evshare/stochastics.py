"""
Joint laws of charging requirement B and parking time D, effective arrival
rates, the attained-service transform g(x) = gamma * E[min(D x, B)] and its
inverse, joint tails, utilities and the per-class table.

Every closed form here is checked against a Monte-Carlo oracle in
tests/test_stochastics.py.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize

from evshare.errors import ParameterError, RangeError
from evshare.grid import Network
from evshare.log import get_logger

log = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]

INVERSE_XTOL = 1e-12


def _like(value: np.ndarray, ref: ArrayLike = None) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# One-dimensional laws


@dataclass(frozen=True)
class Law:
    """Marginal law of B or D: exponential, deterministic, or infinite (D only)."""

    kind: str = "exponential"
    mean: float = 1.0

    def __post_init__(self):
        if self.kind not in ("exponential", "deterministic", "infinite"):
            raise ParameterError(f"unknown law kind {self.kind!r}")
        if self.kind == "infinite":
            object.__setattr__(self, "mean", math.inf)
        elif not (self.mean > 0 and math.isfinite(self.mean)):
            raise ParameterError(f"{self.kind} law needs a finite positive mean, got {self.mean}")

    def survival_gt(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            out = np.exp(-np.maximum(t, 0.0) / self.mean)
        elif self.kind == "deterministic":
            out = (self.mean > t).astype(float)
        else:
            out = np.ones_like(t)
        return _like(out, t)

    def survival_ge(self, t: ArrayLike) -> ArrayLike:
        if self.kind != "deterministic":
            return self.survival_gt(t)
        t = np.asarray(t, dtype=float)
        return _like((self.mean >= t).astype(float), t)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "exponential":
            return rng.exponential(self.mean, n)
        return np.full(n, self.mean)

    def expect_ge(self, func: Callable[[float], float], lower: float) -> float:
        """E[func(X) 1{X >= lower}]."""
        if self.kind == "deterministic":
            return float(func(self.mean)) if self.mean >= lower else 0.0
        if self.kind == "infinite":
            raise ParameterError("expectations over an infinite parking time are undefined")
        m = self.mean
        value, _ = integrate.quad(lambda t: func(t) * math.exp(-t / m) / m, max(lower, 0.0), math.inf, limit=200)
        return value


EXP1 = Law("exponential", 1.0)


# ---------------------------------------------------------------------------
# Joint (B, D) families


class JointBD(ABC):
    """Joint law of (B, D). Methods take scalars or numpy arrays."""

    ratio_family = False

    @property
    @abstractmethod
    def mean_b(self) -> float: ...

    @property
    @abstractmethod
    def mean_d(self) -> float: ...

    @abstractmethod
    def expected_min(self, x: ArrayLike) -> ArrayLike:
        """E[min(D x, B)]."""

    @abstractmethod
    def expected_min_derivative(self, x: ArrayLike) -> ArrayLike:
        """E[D 1{D x < B}], the right derivative of expected_min."""

    @abstractmethod
    def joint_tail(self, b: ArrayLike, d: ArrayLike) -> ArrayLike:
        """P(B > b, D >= d)."""

    @abstractmethod
    def success_prob(self, p: ArrayLike) -> ArrayLike:
        """P(p D >= B): an EV served at constant rate p leaves fully charged."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]: ...

    @property
    def saturation(self) -> float:
        """Rate beyond which expected_min is flat (inf when strictly increasing)."""
        return math.inf

    @property
    def inf_d_over_b(self) -> float:
        return 0.0

    @property
    def increasing_top(self) -> float:
        """Supremum of expected_min over its strictly increasing range."""
        sat = self.saturation
        return float(self.expected_min(sat)) if math.isfinite(sat) else self.mean_b

    def closed_inverse(self, y: float) -> Optional[float]:
        return None

    def mean_sojourn(self, p: float) -> float:
        """E[min(D, B/p)]."""
        if p <= 0:
            return self.mean_d
        if math.isinf(p):
            return 0.0
        return float(self.expected_min(p)) / p

    def log_rate(self, p: float) -> Optional[float]:
        """E[D log min(p, B/D)] when a closed form exists."""
        return None

    def parking_tail(self, d: ArrayLike) -> ArrayLike:
        """P(D >= d)."""
        law = getattr(self, "d_law", None)
        if law is not None:
            return law.survival_ge(d)
        return self.joint_tail(np.zeros_like(np.asarray(d, float)), d)


@dataclass(frozen=True)
class IndependentExp(JointBD):
    """B and D independent exponentials."""

    mean_b: float = 1.0
    mean_d: float = 1.0

    def __post_init__(self):
        if not (self.mean_b > 0 and self.mean_d > 0 and math.isfinite(self.mean_b) and math.isfinite(self.mean_d)):
            raise ParameterError("IndependentExp needs finite positive means")

    def expected_min(self, x):
        xa = np.asarray(x, dtype=float)
        mb, md = self.mean_b, self.mean_d
        with np.errstate(invalid="ignore"):
            out = np.where(np.isinf(xa), mb, mb * md * xa / (mb + md * xa))
        return _like(out, x)

    def expected_min_derivative(self, x):
        xa = np.asarray(x, dtype=float)
        mb, md = self.mean_b, self.mean_d
        return _like(mb * mb * md / (mb + md * xa) ** 2, x)

    def closed_inverse(self, y):
        mb, md = self.mean_b, self.mean_d
        return y * mb / (md * (mb - y))

    def joint_tail(self, b, d):
        out = np.exp(-np.maximum(np.asarray(b, float), 0) / self.mean_b
                     - np.maximum(np.asarray(d, float), 0) / self.mean_d)
        return _like(out)

    def success_prob(self, p):
        pa = np.asarray(p, dtype=float)
        mb, md = self.mean_b, self.mean_d
        with np.errstate(invalid="ignore"):
            out = np.where(np.isinf(pa), 1.0, pa * md / (mb + pa * md))
        return _like(out, p)

    def mean_sojourn(self, p):
        mb, md = self.mean_b, self.mean_d
        return mb * md / (mb + p * md) if math.isfinite(p) else 0.0

    def sample(self, rng, n):
        return rng.exponential(self.mean_b, n), rng.exponential(self.mean_d, n)


@dataclass(frozen=True)
class Independent(JointBD):
    """B and D independent with exponential or deterministic marginals.

    D may be `infinite` (no deadline), used for processor-sharing runs.
    """

    b_law: Law = EXP1
    d_law: Law = EXP1

    def __post_init__(self):
        if self.b_law.kind == "infinite":
            raise ParameterError("charging requirements must have a finite mean")

    @property
    def mean_b(self):
        return self.b_law.mean

    @property
    def mean_d(self):
        return self.d_law.mean

    @property
    def _kinds(self) -> Tuple[str, str]:
        return self.b_law.kind, self.d_law.kind

    def expected_min(self, x):
        xa = np.asarray(x, dtype=float)
        mb, md = self.b_law.mean, self.d_law.mean
        kb, kd = self._kinds
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if kd == "infinite":
                out = np.where(xa > 0, mb, 0.0)
            elif (kb, kd) == ("exponential", "exponential"):
                out = np.where(np.isinf(xa), mb, mb * md * xa / (mb + md * xa))
            elif (kb, kd) == ("deterministic", "exponential"):
                out = np.where(xa > 0, xa * md * -np.expm1(-mb / (np.where(xa > 0, xa, 1.0) * md)), 0.0)
                out = np.where(np.isinf(xa), mb, out)
            elif (kb, kd) == ("exponential", "deterministic"):
                out = -mb * np.expm1(-xa * md / mb)
            else:
                out = np.minimum(xa * md, mb)
        return _like(out, x)

    def expected_min_derivative(self, x):
        xa = np.asarray(x, dtype=float)
        mb, md = self.b_law.mean, self.d_law.mean
        kb, kd = self._kinds
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if kd == "infinite":
                out = np.zeros_like(xa)
            elif (kb, kd) == ("exponential", "exponential"):
                out = mb * mb * md / (mb + md * xa) ** 2
            elif (kb, kd) == ("deterministic", "exponential"):
                u = mb / (np.where(xa > 0, xa, 1e-300) * md)
                out = md * (1.0 - np.exp(-u) * (1.0 + u))
            elif (kb, kd) == ("exponential", "deterministic"):
                out = md * np.exp(-xa * md / mb)
            else:
                out = np.where(xa * md < mb, md, 0.0)
        return _like(out, x)

    @property
    def saturation(self):
        kb, kd = self._kinds
        if kd == "infinite":
            return 0.0
        if (kb, kd) == ("deterministic", "deterministic"):
            return self.b_law.mean / self.d_law.mean
        return math.inf

    @property
    def inf_d_over_b(self):
        kb, kd = self._kinds
        if kd == "infinite":
            return math.inf
        if (kb, kd) == ("deterministic", "deterministic"):
            return self.d_law.mean / self.b_law.mean
        return 0.0

    def closed_inverse(self, y):
        mb, md = self.b_law.mean, self.d_law.mean
        kb, kd = self._kinds
        if (kb, kd) == ("exponential", "exponential"):
            return y * mb / (md * (mb - y))
        if (kb, kd) == ("exponential", "deterministic"):
            return -mb / md * math.log1p(-y / mb)
        if (kb, kd) == ("deterministic", "deterministic"):
            return y / md
        return None

    def joint_tail(self, b, d):
        out = np.asarray(self.b_law.survival_gt(b)) * np.asarray(self.d_law.survival_ge(d))
        return _like(out, out)

    def success_prob(self, p):
        pa = np.asarray(p, dtype=float)
        mb, md = self.b_law.mean, self.d_law.mean
        kb, kd = self._kinds
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if kd == "infinite":
                out = (pa > 0).astype(float)
            elif (kb, kd) == ("exponential", "exponential"):
                out = np.where(np.isinf(pa), 1.0, pa * md / (mb + pa * md))
            elif (kb, kd) == ("deterministic", "exponential"):
                out = np.where(pa > 0, np.exp(-mb / (np.where(pa > 0, pa, 1.0) * md)), 0.0)
            elif (kb, kd) == ("exponential", "deterministic"):
                out = -np.expm1(-pa * md / mb)
            else:
                out = (pa * md >= mb).astype(float)
        return _like(out, p)

    def sample(self, rng, n):
        return self.b_law.sample(rng, n), self.d_law.sample(rng, n)


@dataclass(frozen=True)
class DeterministicRatio(JointBD):
    """B = theta * D."""

    theta: float
    d_law: Law = EXP1
    ratio_family = True

    def __post_init__(self):
        if not self.theta > 0:
            raise ParameterError("theta must be positive")
        if self.d_law.kind == "infinite":
            raise ParameterError("ratio families need a finite parking time")

    @property
    def mean_b(self):
        return self.theta * self.d_law.mean

    @property
    def mean_d(self):
        return self.d_law.mean

    def expected_min(self, x):
        return _like(self.d_law.mean * np.minimum(np.asarray(x, float), self.theta), x)

    def expected_min_derivative(self, x):
        return _like(np.where(np.asarray(x, float) < self.theta, self.d_law.mean, 0.0), x)

    @property
    def saturation(self):
        return self.theta

    @property
    def inf_d_over_b(self):
        return 1.0 / self.theta

    def closed_inverse(self, y):
        return y / self.d_law.mean

    def joint_tail(self, b, d):
        ba, da = np.broadcast_arrays(np.asarray(b, float), np.asarray(d, float))
        ratio = ba / self.theta
        out = np.where(ratio >= da, self.d_law.survival_gt(ratio), self.d_law.survival_ge(da))
        return _like(np.asarray(out, float), ba)

    def success_prob(self, p):
        return _like((np.asarray(p, float) >= self.theta).astype(float), p)

    def mean_sojourn(self, p):
        if p <= 0:
            return self.mean_d
        return self.d_law.mean * min(1.0, self.theta / p)

    def log_rate(self, p):
        return self.d_law.mean * math.log(min(p, self.theta))

    def sample(self, rng, n):
        d = self.d_law.sample(rng, n)
        return self.theta * d, d


@dataclass(frozen=True)
class DiscreteRatio(JointBD):
    """B = Theta * D with Theta discrete on `thetas` with `probs`."""

    thetas: Tuple[float, ...]
    probs: Tuple[float, ...]
    d_law: Law = EXP1
    ratio_family = True

    def __post_init__(self):
        th = tuple(float(t) for t in self.thetas)
        pr = tuple(float(q) for q in self.probs)
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "probs", pr)
        if not th or len(th) != len(pr):
            raise ParameterError("thetas and probs must be nonempty and of equal length")
        if min(th) <= 0 or min(pr) < 0:
            raise ParameterError("thetas must be positive and probs nonnegative")
        if abs(sum(pr) - 1.0) > 1e-9:
            raise ParameterError(f"probs must sum to 1, got {sum(pr)}")
        if self.d_law.kind == "infinite":
            raise ParameterError("ratio families need a finite parking time")

    @property
    def _th(self) -> np.ndarray:
        return np.array(self.thetas)

    @property
    def _q(self) -> np.ndarray:
        return np.array(self.probs)

    @property
    def mean_b(self):
        return float(self._th @ self._q) * self.d_law.mean

    @property
    def mean_d(self):
        return self.d_law.mean

    def expected_min(self, x):
        xa = np.asarray(x, float)
        out = self.d_law.mean * (np.minimum(xa[..., None], self._th) @ self._q)
        return _like(out, x)

    def expected_min_derivative(self, x):
        xa = np.asarray(x, float)
        out = self.d_law.mean * ((xa[..., None] < self._th).astype(float) @ self._q)
        return _like(out, x)

    @property
    def saturation(self):
        return max(self.thetas)

    @property
    def inf_d_over_b(self):
        return 1.0 / max(self.thetas)

    def joint_tail(self, b, d):
        ba, da = np.broadcast_arrays(np.asarray(b, float), np.asarray(d, float))
        total = np.zeros(ba.shape)
        for theta, q in zip(self.thetas, self.probs):
            total = total + q * np.asarray(DeterministicRatio(theta, self.d_law).joint_tail(ba, da))
        return _like(total, ba)

    def success_prob(self, p):
        pa = np.asarray(p, float)
        return _like((pa[..., None] >= self._th).astype(float) @ self._q, p)

    def mean_sojourn(self, p):
        if p <= 0:
            return self.mean_d
        return self.d_law.mean * float(np.minimum(1.0, self._th / p) @ self._q)

    def log_rate(self, p):
        return self.d_law.mean * float(np.log(np.minimum(p, self._th)) @ self._q)

    def sample(self, rng, n):
        d = self.d_law.sample(rng, n)
        idx = rng.choice(len(self.thetas), size=n, p=self._q)
        return self._th[idx] * d, d


@dataclass(frozen=True)
class ParetoRatio(JointBD):
    """B = H * D with P(H > h) = (kappa / (h + kappa))**a, a > 1."""

    a: float
    kappa: float
    d_law: Law = EXP1
    ratio_family = True

    def __post_init__(self):
        if not self.a > 1:
            raise ParameterError("Pareto shape a must exceed 1 (finite mean)")
        if not self.kappa > 0:
            raise ParameterError("Pareto scale kappa must be positive")
        if self.d_law.kind == "infinite":
            raise ParameterError("ratio families need a finite parking time")

    @property
    def mean_h(self) -> float:
        return self.kappa / (self.a - 1)

    @property
    def mean_b(self):
        return self.mean_h * self.d_law.mean

    @property
    def mean_d(self):
        return self.d_law.mean

    def h_survival(self, h: ArrayLike) -> ArrayLike:
        ha = np.maximum(np.asarray(h, float), 0.0)
        return _like((self.kappa / (ha + self.kappa)) ** self.a, h)

    def expected_min(self, x):
        xa = np.asarray(x, float)
        a, k = self.a, self.kappa
        out = self.d_law.mean * k / (a - 1) * (1.0 - (k / (xa + k)) ** (a - 1))
        return _like(out, x)

    def expected_min_derivative(self, x):
        return _like(self.d_law.mean * np.asarray(self.h_survival(x)), x)

    def closed_inverse(self, y):
        a, k = self.a, self.kappa
        u = 1.0 - y * (a - 1) / (self.d_law.mean * k)
        return k * u ** (-1.0 / (a - 1)) - k

    def _tail_scalar(self, b: float, d: float) -> float:
        if b <= 0:
            return float(self.d_law.survival_ge(d))
        a, k = self.a, self.kappa
        return self.d_law.expect_ge(lambda t: (k * t / (b + k * t)) ** a if t > 0 else 0.0, d)

    def joint_tail(self, b, d):
        out = np.vectorize(self._tail_scalar, otypes=[float])(b, d)
        return _like(out, out)

    def success_prob(self, p):
        pa = np.asarray(p, float)
        return _like(1.0 - np.asarray(self.h_survival(pa)), p)

    def log_rate(self, p):
        a, k = self.a, self.kappa
        def density(h: float) -> float:
            return a * k ** a / (h + k) ** (a + 1)

        below, _ = integrate.quad(lambda h: math.log(h) * density(h), 0.0, p, limit=200)
        return self.d_law.mean * (math.log(p) * float(self.h_survival(p)) + below)

    def sample(self, rng, n):
        d = self.d_law.sample(rng, n)
        h = self.kappa * (rng.random(n) ** (-1.0 / self.a) - 1.0)
        return h * d, d


@dataclass(frozen=True, eq=False)
class Empirical(JointBD):
    """Equally weighted (b, d) samples."""

    b: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, float).ravel()
        d = np.asarray(self.d, float).ravel()
        if b.size == 0 or b.size != d.size:
            raise ParameterError("empirical law needs equally many b and d samples")
        if np.any(b < 0) or np.any(d < 0):
            raise ParameterError("empirical samples must be nonnegative")
        if not (b.mean() > 0 and d.mean() > 0):
            raise ParameterError("empirical means must be positive")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", d)

    @property
    def mean_b(self):
        return float(self.b.mean())

    @property
    def mean_d(self):
        return float(self.d.mean())

    def expected_min(self, x):
        xa = np.asarray(x, float)
        with np.errstate(invalid="ignore"):
            prod = np.where(self.d > 0, xa[..., None] * self.d, 0.0)
        return _like(np.minimum(prod, self.b).mean(axis=-1), x)

    def expected_min_derivative(self, x):
        xa = np.asarray(x, float)
        below = (xa[..., None] * self.d < self.b).astype(float)
        return _like((below * self.d).mean(axis=-1), x)

    @property
    def saturation(self):
        pos = self.d > 0
        return float(np.max(self.b[pos] / self.d[pos])) if np.any(pos) else 0.0

    @property
    def inf_d_over_b(self):
        pos = self.b > 0
        return float(np.min(self.d[pos] / self.b[pos])) if np.any(pos) else math.inf

    def parking_tail(self, d):
        da = np.asarray(d, float)
        return _like((self.d >= da[..., None]).mean(axis=-1), d)

    def joint_tail(self, b, d):
        ba, da = np.broadcast_arrays(np.asarray(b, float), np.asarray(d, float))
        out = ((self.b > ba[..., None]) & (self.d >= da[..., None])).mean(axis=-1)
        return _like(out, ba)

    def success_prob(self, p):
        pa = np.asarray(p, float)
        return _like((pa[..., None] * self.d >= self.b).mean(axis=-1), p)

    def log_rate(self, p):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.d > 0, self.b / np.where(self.d > 0, self.d, 1.0), np.inf)
            terms = np.where(self.d > 0, self.d * np.log(np.minimum(p, ratio)), 0.0)
        return float(terms.mean())

    def sample(self, rng, n):
        idx = rng.integers(0, self.b.size, n)
        return self.b[idx], self.d[idx]


# ---------------------------------------------------------------------------
# g-transform


def g_value(gamma: float, joint: JointBD, x: ArrayLike) -> ArrayLike:
    """g(x) = gamma * E[min(D x, B)]; g(0) = 0."""
    return _like(gamma * np.asarray(joint.expected_min(x)), x)


def g_derivative(gamma: float, joint: JointBD, x: ArrayLike) -> ArrayLike:
    return _like(gamma * np.asarray(joint.expected_min_derivative(x)), x)


def g_inverse(gamma: float, joint: JointBD, lam: float) -> float:
    """The x in the strictly increasing range of g with g(x) = lam."""
    if lam == 0:
        return 0.0
    if gamma <= 0 or lam < 0:
        raise RangeError(f"g_inverse undefined for gamma={gamma}, lam={lam}")
    target = lam / gamma
    top = joint.increasing_top
    if target >= top:
        raise RangeError(f"lam={lam} at or beyond the increasing range of g (sup {gamma * top})")
    closed = joint.closed_inverse(target)
    if closed is not None:
        return float(closed)
    x_hi = 1.0
    while float(joint.expected_min(x_hi)) <= target:
        x_hi *= 2.0
        if x_hi > 1e15:
            raise RangeError(f"no bracket for g_inverse(lam={lam})")
    return float(optimize.brentq(lambda x: float(joint.expected_min(x)) - target, 0.0, x_hi, xtol=INVERSE_XTOL))


def joint_tail(joint: JointBD, b_thresh: ArrayLike, d_thresh: ArrayLike) -> ArrayLike:
    """P(B > b_thresh, D >= d_thresh)."""
    return joint.joint_tail(b_thresh, d_thresh)


# ---------------------------------------------------------------------------
# Utilities and the class table


@dataclass(frozen=True)
class Utility:
    """u(p) = w log p, or w p^(1-alpha) / (1-alpha) for the power family."""

    form: str = "log"
    weight: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.form not in ("log", "power"):
            raise ParameterError(f"unknown utility form {self.form!r}")
        if not self.weight > 0:
            raise ParameterError("utility weights must be positive")
        if self.form == "power" and (self.alpha <= 0 or self.alpha == 1):
            raise ParameterError("power utility needs alpha > 0, alpha != 1")

    def value(self, p: ArrayLike) -> ArrayLike:
        pa = np.asarray(p, float)
        with np.errstate(divide="ignore"):
            if self.form == "log":
                out = self.weight * np.log(pa)
            else:
                out = self.weight * pa ** (1 - self.alpha) / (1 - self.alpha)
        return _like(out, p)

    def derivative(self, p: ArrayLike) -> ArrayLike:
        pa = np.asarray(p, float)
        with np.errstate(divide="ignore"):
            out = self.weight / pa if self.form == "log" else self.weight * pa ** (-self.alpha)
        return _like(out, p)

    def second_derivative(self, p: ArrayLike) -> ArrayLike:
        pa = np.asarray(p, float)
        with np.errstate(divide="ignore"):
            if self.form == "log":
                out = -self.weight / pa ** 2
            else:
                out = -self.alpha * self.weight * pa ** (-self.alpha - 1)
        return _like(out, p)

    @property
    def identity_point(self) -> Optional[float]:
        """The p with u(p) = 0."""
        if self.form == "log":
            return 1.0
        return 0.0 if self.alpha < 1 else None


@dataclass(frozen=True, eq=False)
class ClassTable:
    """Per-(node, type) arrival rates, laws, caps and utility weights.

    Attributes:
        lam: (I, J) arrival rates; row i-1 is node i.
        c_max: (J,) maximum charging rate per type.
        joint: J joint laws of (B, D).
        weights: (I, J) utility weights w_ij.
        form: utility form shared by all classes ("log" or "power").
        alpha: exponent of the power family.
        initial_joint: laws of (B0, D0) for the initial population; defaults to `joint`.
    """

    lam: np.ndarray
    c_max: np.ndarray
    joint: Tuple[JointBD, ...]
    weights: np.ndarray
    form: str = "log"
    alpha: float = 0.5
    initial_joint: Tuple[JointBD, ...] = field(default=())

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, float))
        c_max = np.atleast_1d(np.asarray(self.c_max, float))
        weights = np.broadcast_to(np.asarray(self.weights, float), lam.shape).copy()
        joint = tuple(self.joint)
        if len(joint) != lam.shape[1] or len(c_max) != lam.shape[1]:
            raise ParameterError(f"{lam.shape[1]} types in lambda, {len(joint)} laws, {len(c_max)} caps")
        if np.any(lam < 0):
            raise ParameterError("arrival rates must be nonnegative")
        if np.any(c_max <= 0):
            raise ParameterError("c_max must be positive")
        if np.any(weights <= 0):
            raise ParameterError("utility weights must be positive")
        Utility(self.form, 1.0, self.alpha)
        init = tuple(self.initial_joint) or joint
        if len(init) != len(joint):
            raise ParameterError("initial_joint needs one law per type")
        for name, value in (("lam", lam), ("c_max", c_max), ("weights", weights)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "joint", joint)
        object.__setattr__(self, "initial_joint", init)

    @property
    def node_count(self) -> int:
        return self.lam.shape[0]

    @property
    def type_count(self) -> int:
        return self.lam.shape[1]

    def utility(self, i: int, j: int) -> Utility:
        """Utility of class (node i, type j); i is 1-based."""
        return Utility(self.form, float(self.weights[i - 1, j]), self.alpha)

    @property
    def mean_b(self) -> np.ndarray:
        return np.array([law.mean_b for law in self.joint])

    @property
    def mean_d(self) -> np.ndarray:
        return np.array([law.mean_d for law in self.joint])

    def with_lambda(self, lam: np.ndarray) -> "ClassTable":
        return ClassTable(lam, self.c_max, self.joint, self.weights, self.form, self.alpha, self.initial_joint)

    def with_weights(self, weights: np.ndarray) -> "ClassTable":
        return ClassTable(self.lam, self.c_max, self.joint, weights, self.form, self.alpha, self.initial_joint)

    @classmethod
    def build(
        cls,
        net: Network,
        lam: Union[Sequence[float], np.ndarray],
        joint: Union[JointBD, Sequence[JointBD]],
        *,
        c_max: Union[float, Sequence[float]] = math.inf,
        weighting: Union[str, np.ndarray] = "uniform",
        form: str = "log",
        alpha: float = 0.5,
        initial_joint: Sequence[JointBD] = (),
    ) -> "ClassTable":
        """Class table for `net`; a 1-D `lam` means a single type.

        `weighting` is "uniform" (w = 1), "resistance" (w_ij = cum_r[i]) or an
        explicit (I, J) array.
        """
        lam_arr = np.asarray(lam, float)
        if lam_arr.ndim == 1:
            lam_arr = lam_arr[:, None]
        if lam_arr.shape[0] != net.node_count:
            raise ParameterError(f"lambda has {lam_arr.shape[0]} rows for {net.node_count} nodes")
        joints = (joint,) if isinstance(joint, JointBD) else tuple(joint)
        caps = np.broadcast_to(np.asarray(c_max, float), (lam_arr.shape[1],))
        if isinstance(weighting, str):
            if weighting == "uniform":
                weights = np.ones_like(lam_arr)
            elif weighting == "resistance":
                weights = np.repeat(net.cum_r[1:, None], lam_arr.shape[1], axis=1)
            else:
                raise ParameterError(f"unknown weighting {weighting!r}")
        else:
            weights = np.asarray(weighting, float)
        return cls(lam_arr, caps, joints, weights, form, alpha, tuple(initial_joint))


def gamma_effective(net: Network, classes: ClassTable) -> np.ndarray:
    """Blocking-adjusted arrival rates gamma[i-1, j]."""
    lam = classes.lam
    gamma = np.zeros_like(lam)
    mean_d = classes.mean_d
    for i in range(lam.shape[0]):
        total = lam[i].sum()
        if total <= 0:
            continue
        k = net.k_spaces[i + 1]
        if math.isinf(k):
            gamma[i] = lam[i]
            continue
        mix = lam[i] / total
        denom = float(mix @ mean_d)
        admitted = min(total, k / denom) if denom > 0 else total
        gamma[i] = mix * admitted
    return gamma


# ---------------------------------------------------------------------------
# Erlang loss


def erlang_b(servers: float, load: float) -> float:
    """Blocking probability of an M/G/K/K system by the stable recursion."""
    if load <= 0:
        return 0.0
    if math.isinf(servers):
        return 0.0
    blocking = 1.0
    for k in range(1, int(servers) + 1):
        blocking = load * blocking / (k + load * blocking)
    return blocking


def erlang_mean_occupancy(servers: float, load: float) -> float:
    """E[Q] of an M/G/K/K system: load * (1 - ErlangB)."""
    return load * (1.0 - erlang_b(servers, load))


def expected_occupancy(net: Network, classes: ClassTable) -> np.ndarray:
    """E[Q_ij] per class, Erlang-loss at each node with parking time as holding time."""
    lam = classes.lam
    mean_d = classes.mean_d
    out = np.zeros_like(lam)
    for i in range(lam.shape[0]):
        per_type = lam[i] * mean_d
        load = float(per_type.sum())
        out[i] = per_type * (1.0 - erlang_b(net.k_spaces[i + 1], load))
    return out
