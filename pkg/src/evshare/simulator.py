"""
Discrete-event simulation of EV charging on a radial network.

Rates are piecewise constant between events and recomputed by the
allocator whenever the uncharged population changes. Every EV of class
(i, j) receives the same rate, so a class keeps one cumulative-service
clock S_ij(t) and an EV arriving at time a with requirement b finishes
when S_ij reaches S_ij(a) + b. Completion thresholds sit in a heap per
class; deadlines sit in one global heap. Departed EVs are removed lazily.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from evshare.allocator import Allocator
from evshare.errors import EvShareError, ParameterError, SimulationError, WidenTruncationError
from evshare.grid import Network
from evshare.log import get_logger
from evshare.stochastics import ClassTable

log = get_logger(__name__)

BATCHES = 20
SAMPLE_BUFFER = 4096
WARMUP_FRACTION = 0.2

# stream purposes in the SeedSequence spawn key
ARRIVALS = 0
REQUIREMENTS = 1


@dataclass
class EvRecord:
    node: int
    type: int
    residual_b: float
    deadline_abs: float
    arrival_time: float
    threshold: float = 0.0
    charged: bool = False


@dataclass
class SimCounters:
    """Event counts per class over the whole run."""

    generated: np.ndarray
    blocked: np.ndarray
    admitted: np.ndarray
    completed: np.ndarray
    expired: np.ndarray
    uncharged_at_horizon: np.ndarray = None

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "SimCounters":
        return cls(*(np.zeros(shape, dtype=np.int64) for _ in range(6)))

    def conserved(self) -> bool:
        ok_admit = np.array_equal(self.admitted, self.completed + self.expired + self.uncharged_at_horizon)
        ok_arrivals = np.array_equal(self.generated, self.admitted + self.blocked)
        return ok_admit and ok_arrivals

    def merged(self, other: "SimCounters") -> "SimCounters":
        return SimCounters(
            self.generated + other.generated,
            self.blocked + other.blocked,
            self.admitted + other.admitted,
            self.completed + other.completed,
            self.expired + other.expired,
            self.uncharged_at_horizon + other.uncharged_at_horizon,
        )


@dataclass(eq=False)
class SimMetrics:
    """Time averages after warmup with batch-means (or across-replication) half-widths."""

    mean_z: np.ndarray
    mean_q: np.ndarray
    ci_z: np.ndarray
    ci_q: np.ndarray
    success_direct: np.ndarray
    blocking_fraction: np.ndarray
    counters: SimCounters
    seed: int
    horizon: float
    warmup: float
    replications: int = 1
    events: int = 0
    distribution: Optional[Dict[Tuple[int, ...], float]] = None
    event_log: Optional[List[Tuple[float, str, int, int]]] = None

    @property
    def success_fraction(self) -> np.ndarray:
        return success_fraction_estimate(self)[0]

    def to_frame(self, labels=None) -> pd.DataFrame:
        nodes, types = self.mean_z.shape
        node_ids = np.arange(1, nodes + 1) if labels is None else np.asarray(labels)[1:]
        return pd.DataFrame({
            "node": np.repeat(node_ids, types),
            "type": np.tile(np.arange(types), nodes),
            "mean_z": self.mean_z.ravel(),
            "mean_q": self.mean_q.ravel(),
            "success_frac": self.success_fraction.ravel(),
            "block_frac": np.repeat(self.blocking_fraction, types),
            "ci_z": self.ci_z.ravel(),
        })

    def event_frame(self) -> pd.DataFrame:
        rows = self.event_log or []
        return pd.DataFrame(rows, columns=["t", "event", "node", "type"])


def _stream(seed: int, rep: int, node: int, etype: int, purpose: int) -> np.random.Generator:
    """Counter-based generator keyed by (replication, node, type, purpose)."""
    seq = np.random.SeedSequence(seed, spawn_key=(rep, node, etype, purpose))
    return np.random.Generator(np.random.Philox(seq))


class _Buffered:
    """Pre-drawn samples from a generator, refilled in blocks."""

    def __init__(self, draw, size: int = SAMPLE_BUFFER):
        self._draw = draw
        self._size = size
        self._pos = 0
        self._data = None

    def next(self):
        if self._data is None or self._pos >= len(self._data[0]):
            self._data = self._draw(self._size)
            self._pos = 0
        out = tuple(col[self._pos] for col in self._data)
        self._pos += 1
        return out


class _BatchAccumulator:
    """Time integrals of z and q over equal batches of [warmup, horizon]."""

    def __init__(self, warmup: float, horizon: float, shape: Tuple[int, int], batches: int = BATCHES):
        self.warmup = warmup
        self.horizon = horizon
        self.edges = np.linspace(warmup, horizon, batches + 1)
        self.z = np.zeros((batches,) + shape)
        self.q = np.zeros((batches,) + shape)

    def add(self, t0: float, t1: float, z: np.ndarray, q: np.ndarray) -> None:
        t0 = max(t0, self.warmup)
        if t1 <= t0:
            return
        first = max(0, int(np.searchsorted(self.edges, t0, side="right")) - 1)
        for b in range(first, len(self.edges) - 1):
            lo = max(t0, self.edges[b])
            hi = min(t1, self.edges[b + 1])
            if hi <= lo:
                if self.edges[b] >= t1:
                    break
                continue
            self.z[b] += (hi - lo) * z
            self.q[b] += (hi - lo) * q

    def means(self):
        width = self.edges[1] - self.edges[0]
        batch_z = self.z / width
        batch_q = self.q / width
        return batch_z.mean(axis=0), batch_q.mean(axis=0), _halfwidth(batch_z), _halfwidth(batch_q)


def _halfwidth(samples: np.ndarray, level: float = 0.95) -> np.ndarray:
    n = samples.shape[0]
    if n < 2:
        return np.full(samples.shape[1:], np.nan)
    quantile = stats.t.ppf(0.5 + level / 2.0, n - 1)
    return quantile * samples.std(axis=0, ddof=1) / math.sqrt(n)


class Replication:
    """One single-threaded run of the event loop."""

    def __init__(
        self,
        net: Network,
        classes: ClassTable,
        allocator: Allocator,
        *,
        horizon: float,
        warmup: float,
        seed: int,
        rep: int = 0,
        state_distribution: bool = False,
        truncation: Optional[int] = None,
        event_log: bool = False,
    ):
        if not horizon > warmup >= 0:
            raise ParameterError(f"need horizon > warmup >= 0, got horizon={horizon}, warmup={warmup}")
        self.net = net
        self.classes = classes
        self.allocator = allocator
        self.horizon = float(horizon)
        self.warmup = float(warmup)
        self.seed = int(seed)
        self.rep = int(rep)
        self.shape = (classes.node_count, classes.type_count)
        self.truncation = truncation
        self.track_states = state_distribution
        self.log_events = event_log

        self.t = 0.0
        self.z = np.zeros(self.shape, dtype=np.int64)
        self.q = np.zeros(self.shape, dtype=np.int64)
        self.service = np.zeros(self.shape)
        self.rates = np.zeros(self.shape)
        self.thresholds: Dict[Tuple[int, int], List[Tuple[float, int]]] = {c: [] for c in np.ndindex(*self.shape)}
        self.deadlines: List[Tuple[float, int]] = []
        self.evs: Dict[int, EvRecord] = {}
        self._next_id = 0
        self.counters = SimCounters.zeros(self.shape)
        self.post_admitted = np.zeros(self.shape, dtype=np.int64)
        self.post_completed = np.zeros(self.shape, dtype=np.int64)
        self.post_expired = np.zeros(self.shape, dtype=np.int64)
        self.post_generated = np.zeros(self.shape, dtype=np.int64)
        self.post_blocked = np.zeros(self.shape, dtype=np.int64)
        self.batches = _BatchAccumulator(self.warmup, self.horizon, self.shape)
        self.distribution: Dict[Tuple[int, ...], float] = {}
        self.events: List[Tuple[float, str, int, int]] = []
        self.event_count = 0

        self.next_arrival = np.full(self.shape, math.inf)
        self._gaps: Dict[Tuple[int, int], _Buffered] = {}
        self._jobs: Dict[Tuple[int, int], _Buffered] = {}
        for i, j in np.ndindex(*self.shape):
            rate = float(classes.lam[i, j])
            if rate <= 0:
                continue
            gap_rng = _stream(self.seed, self.rep, i, j, ARRIVALS)
            job_rng = _stream(self.seed, self.rep, i, j, REQUIREMENTS)
            joint = classes.joint[j]
            self._gaps[(i, j)] = _Buffered(lambda n, g=gap_rng, r=rate: (g.exponential(1.0 / r, n),))
            self._jobs[(i, j)] = _Buffered(lambda n, g=job_rng, jt=joint: jt.sample(g, n))
            self.next_arrival[i, j] = self._gaps[(i, j)].next()[0]

    # -- bookkeeping -------------------------------------------------------

    def _record(self, kind: str, i: int, j: int) -> None:
        self.event_count += 1
        if self.log_events:
            self.events.append((self.t, kind, self.net.label(i + 1), j))

    def _reallocate(self) -> None:
        try:
            self.rates = self.allocator.rates(self.z.astype(float))
        except EvShareError as exc:
            raise SimulationError(f"allocation failed at t={self.t:.6g}: {exc}", time=self.t) from exc

    def _advance(self, t_next: float) -> None:
        span = t_next - self.t
        if span > 0:
            self.batches.add(self.t, t_next, self.z, self.q)
            if self.track_states and t_next > self.warmup:
                key = tuple(int(v) for v in self.z.ravel())
                if self.truncation is not None and max(key, default=0) > self.truncation:
                    raise WidenTruncationError(
                        f"state {key} exceeds truncation level {self.truncation}", time=self.t)
                self.distribution[key] = self.distribution.get(key, 0.0) + (t_next - max(self.t, self.warmup))
            self.service += self.rates * span
        self.t = t_next

    def _next_deadline(self) -> float:
        heap = self.deadlines
        while heap and heap[0][1] not in self.evs:
            heapq.heappop(heap)
        return heap[0][0] if heap else math.inf

    def _next_completion(self) -> Tuple[float, Optional[Tuple[int, int]]]:
        best, best_class = math.inf, None
        for c, heap in self.thresholds.items():
            while heap and (heap[0][1] not in self.evs or self.evs[heap[0][1]].charged):
                heapq.heappop(heap)
            rate = self.rates[c]
            if not heap or rate <= 0:
                continue
            when = self.t + max(heap[0][0] - self.service[c], 0.0) / rate
            if when < best:
                best, best_class = when, c
        return best, best_class

    # -- events ------------------------------------------------------------

    def _depart(self, ev_id: int) -> None:
        ev = self.evs.pop(ev_id)
        self.q[ev.node, ev.type] -= 1

    def _on_deadline(self) -> bool:
        _, ev_id = heapq.heappop(self.deadlines)
        ev = self.evs[ev_id]
        c = (ev.node, ev.type)
        changed = False
        if not ev.charged:
            self.z[c] -= 1
            self.counters.expired[c] += 1
            if ev.arrival_time >= self.warmup:
                self.post_expired[c] += 1
            ev.residual_b = max(ev.threshold - self.service[c], 0.0)
            self._record("expiry", *c)
            changed = True
        else:
            self._record("departure", *c)
        self._depart(ev_id)
        return changed

    def _on_completion(self, c: Tuple[int, int]) -> None:
        _, ev_id = heapq.heappop(self.thresholds[c])
        ev = self.evs[ev_id]
        ev.charged = True
        ev.residual_b = 0.0
        self.z[c] -= 1
        self.counters.completed[c] += 1
        if ev.arrival_time >= self.warmup:
            self.post_completed[c] += 1
        self._record("completion", *c)
        if math.isinf(ev.deadline_abs):
            # no deadline: leave once charged
            self._depart(ev_id)

    def _on_arrival(self, c: Tuple[int, int]) -> bool:
        i, j = c
        self.next_arrival[c] = self.t + self._gaps[c].next()[0]
        b, d = self._jobs[c].next()
        post = self.t >= self.warmup
        self.counters.generated[c] += 1
        if post:
            self.post_generated[c] += 1
        if self.q[i].sum() >= self.net.k_spaces[i + 1]:
            self.counters.blocked[c] += 1
            if post:
                self.post_blocked[c] += 1
            self._record("blocked", i, j)
            return False
        self.counters.admitted[c] += 1
        if post:
            self.post_admitted[c] += 1
        self.q[c] += 1
        ev_id = self._next_id
        self._next_id += 1
        ev = EvRecord(i, j, float(b), self.t + float(d), self.t, self.service[c] + float(b))
        self.evs[ev_id] = ev
        self._record("arrival", i, j)
        if math.isfinite(ev.deadline_abs):
            heapq.heappush(self.deadlines, (ev.deadline_abs, ev_id))
        if b <= 0:
            ev.charged = True
            self.counters.completed[c] += 1
            if post:
                self.post_completed[c] += 1
            self._record("completion", i, j)
            if math.isinf(ev.deadline_abs):
                self._depart(ev_id)
            return False
        # a zero parking time expires through the deadline heap at the same instant
        self.z[c] += 1
        heapq.heappush(self.thresholds[c], (ev.threshold, ev_id))
        return True

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimMetrics:
        """Simultaneous events go deadline first, then completion, then arrival."""
        self._reallocate()
        while True:
            t_dead = self._next_deadline()
            t_comp, comp_class = self._next_completion()
            arr_flat = int(np.argmin(self.next_arrival))
            t_arr = float(self.next_arrival.flat[arr_flat])
            t_next = min(t_dead, t_comp, t_arr)
            if t_next > self.horizon:
                self._advance(self.horizon)
                break
            self._advance(t_next)
            if t_dead == t_next:
                changed = self._on_deadline()
            elif t_comp == t_next:
                self._on_completion(comp_class)
                changed = True
            else:
                changed = self._on_arrival(divmod(arr_flat, self.shape[1]))
            if changed:
                self._reallocate()
            if np.any(self.z > self.q) or np.any(self.q.sum(axis=1) > self.net.k_spaces[1:]):
                raise SimulationError("population invariant broken", time=self.t)

        for ev in self.evs.values():
            if not ev.charged:
                self.counters.uncharged_at_horizon[ev.node, ev.type] += 1
        mean_z, mean_q, ci_z, ci_q = self.batches.means()
        resolved = self.post_completed + self.post_expired
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = np.where(resolved > 0, self.post_completed / resolved, np.nan)
            generated = self.post_generated.sum(axis=1)
            blocking = np.where(generated > 0, self.post_blocked.sum(axis=1) / generated, 0.0)
        distribution = None
        if self.track_states:
            total = self.horizon - self.warmup
            distribution = {k: v / total for k, v in sorted(self.distribution.items())}
        log.info("sim.replication", rep=self.rep, events=self.event_count, horizon=self.horizon)
        return SimMetrics(mean_z, mean_q, ci_z, ci_q, direct, blocking, self.counters, self.seed,
                          self.horizon, self.warmup, 1, self.event_count, distribution,
                          self.events if self.log_events else None)


def simulate(
    net: Network,
    classes: ClassTable,
    horizon: float,
    warmup: Optional[float] = None,
    seed: int = 0,
    model: str = "distflow",
    *,
    rep: int = 0,
    allocator: Optional[Allocator] = None,
    state_distribution: bool = False,
    truncation: Optional[int] = None,
    event_log: bool = False,
) -> SimMetrics:
    """Simulate one replication; warmup defaults to 20% of the horizon."""
    if warmup is None:
        warmup = WARMUP_FRACTION * horizon
    if allocator is None:
        allocator = Allocator(net, classes, model)
    return Replication(net, classes, allocator, horizon=horizon, warmup=warmup, seed=seed, rep=rep,
                       state_distribution=state_distribution, truncation=truncation,
                       event_log=event_log).run()


def _replication_job(args) -> SimMetrics:
    net, classes, horizon, warmup, seed, model, rep, kwargs = args
    return simulate(net, classes, horizon, warmup, seed, model, rep=rep, **kwargs)


def merge_replications(runs: List[SimMetrics]) -> SimMetrics:
    """Replication means with Student-t half-widths; counters and distributions are pooled."""
    if len(runs) == 1:
        return runs[0]
    z = np.stack([r.mean_z for r in runs])
    q = np.stack([r.mean_q for r in runs])
    counters = runs[0].counters
    for r in runs[1:]:
        counters = counters.merged(r.counters)
    with np.errstate(invalid="ignore"):
        direct = np.nanmean(np.stack([r.success_direct for r in runs]), axis=0)
    blocking = np.mean(np.stack([r.blocking_fraction for r in runs]), axis=0)
    distribution = None
    if all(r.distribution is not None for r in runs):
        distribution = {}
        for r in runs:
            for k, v in r.distribution.items():
                distribution[k] = distribution.get(k, 0.0) + v / len(runs)
        distribution = dict(sorted(distribution.items()))
    first = runs[0]
    return SimMetrics(z.mean(axis=0), q.mean(axis=0), _halfwidth(z), _halfwidth(q), direct, blocking,
                      counters, first.seed, first.horizon, first.warmup, len(runs),
                      sum(r.events for r in runs), distribution, first.event_log)


def simulate_replications(
    net: Network,
    classes: ClassTable,
    horizon: float,
    warmup: Optional[float] = None,
    seed: int = 0,
    model: str = "distflow",
    *,
    replications: int = 1,
    jobs: int = 1,
    **kwargs,
) -> SimMetrics:
    """Independent replications, in worker processes when `jobs` > 1."""
    tasks = [(net, classes, horizon, warmup, seed, model, rep, kwargs) for rep in range(replications)]
    if jobs > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_replication_job, tasks))
    else:
        runs = [_replication_job(task) for task in tasks]
    return merge_replications(runs)


def success_fraction_estimate(metrics: SimMetrics) -> Tuple[np.ndarray, np.ndarray]:
    """(1 - mean_z / mean_q, completed / resolved admissions); NaN where nothing was admitted."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(metrics.mean_q > 0, 1.0 - metrics.mean_z / metrics.mean_q, np.nan)
    return ratio, metrics.success_direct


def state_distribution(metrics: SimMetrics) -> Dict[Tuple[int, ...], float]:
    """Time-weighted empirical law of the flattened z vector."""
    if metrics.distribution is None:
        raise ParameterError("the run did not track the state distribution (state_distribution=True)")
    return metrics.distribution


def total_variation(p: Dict[Tuple[int, ...], float], q: Dict[Tuple[int, ...], float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
