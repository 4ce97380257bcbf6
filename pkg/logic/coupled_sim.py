"""Coupled simulation of the standard queue and the perturbed queue.

Both queues read the same arrival process and the same service points. The
perturbed queue additionally loses service points (cancellations, a thinning of
the service points with probability eps p-(X)/mu) and gains departures from a
thinned dominating Poisson process of rate eps M (acceptance p+(X)/M). The
environment is only evaluated at candidate points, through one path session.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from config.config import SimulationConfig
from .environment import EnvironmentModel
from .errors import ReplicaAborted
from .perturbation import PerturbationSpec, validate
from .random_stream import ReplicaStreams, replica_seed
from .runner import ReplicaRun, run_replicas
from .state.models import (
    BusyPeriodSample,
    CoefficientEstimate,
    EventClass,
    PointProcessLog,
    QueueParams,
)

logger = logging.getLogger(__name__)

INF = math.inf


@dataclass
class _CoupledTrace:
    b_standard: float = INF
    b_perturbed: float = INF
    added: List[float] = field(default_factory=list)       # accepted while the P-queue is busy
    canceled: List[float] = field(default_factory=list)    # canceled while the P-queue is busy
    start_state: object = None


def _run_coupled(streams: ReplicaStreams, params: QueueParams, env: EnvironmentModel,
                 spec: PerturbationSpec, x0=None, initial_customers: int = 1,
                 track_standard: bool = True, max_events: int = SimulationConfig.max_events) -> _CoupledTrace:
    lam, mu, eps = params.lam, params.mu, params.epsilon
    trace = _CoupledTrace()
    x0 = env.sample_stationary(streams.environment) if x0 is None else x0
    trace.start_state = x0
    session = env.path_session(streams.environment, x0)

    add_rate = eps * spec.bound_M if spec.sup_plus > 0 else 0.0
    cancels = eps > 0 and spec.sup_minus > 0
    p_plus, p_minus, bound = spec.p_plus, spec.p_minus, spec.bound_M

    t_arrival = streams.arrivals.exponential(lam)
    t_service = streams.services.exponential(mu)
    t_extra = streams.dominating.exponential(add_rate)

    level = initial_customers if track_standard else 0
    level_p = initial_customers
    events = 0
    while level > 0 or level_p > 0:
        events += 1
        if events > max_events:
            raise ReplicaAborted("event_cap", events)
        t = min(t_arrival, t_service, t_extra)
        if (t == t_arrival) + (t == t_service) + (t == t_extra) > 1:
            raise ReplicaAborted("simultaneous_points", events)

        if t == t_arrival:
            if level > 0:
                level += 1
            if level_p > 0:
                level_p += 1
            t_arrival += streams.arrivals.exponential(lam)

        elif t == t_service:
            if level > 0:
                level -= 1
                if level == 0:
                    trace.b_standard = t
            mark = streams.marks.uniform()
            if level_p > 0:
                canceled = cancels and mark * mu < eps * float(p_minus(session.value_at(t)))
                if canceled:
                    trace.canceled.append(t)
                else:
                    level_p -= 1
                    if level_p == 0:
                        trace.b_perturbed = t
            t_service += streams.services.exponential(mu)

        else:
            mark = streams.dominating.uniform()
            if level_p > 0 and mark * bound < float(p_plus(session.value_at(t))):
                trace.added.append(t)
                level_p -= 1
                if level_p == 0:
                    trace.b_perturbed = t
            t_extra += streams.dominating.exponential(add_rate)
    return trace


def classify(b_standard: float, b_perturbed: float, added: Sequence[float], canceled: Sequence[float]) -> EventClass:
    """Event class of one coupled busy period from its effective extra points"""
    if not added and not canceled:
        return EventClass.NONE
    t_plus = added[0] if added else INF
    t_minus = canceled[0] if canceled else INF
    if t_plus < b_standard and not canceled:
        return EventClass.A_PLUS
    if t_minus <= b_standard <= t_plus < b_perturbed:
        return EventClass.A_PM
    if t_minus <= b_standard and not added:
        return EventClass.A_MINUS
    return EventClass.OTHER


def simulate_coupled_busy(streams: ReplicaStreams, params: QueueParams, env: EnvironmentModel,
                          spec: PerturbationSpec, x0=None,
                          max_events: int = SimulationConfig.max_events) -> BusyPeriodSample:
    trace = _run_coupled(streams, params, env, spec, x0=x0, max_events=max_events)
    b, bt = trace.b_standard, trace.b_perturbed
    added, canceled = trace.added, trace.canceled
    return BusyPeriodSample(
        b_standard=b,
        b_perturbed=bt,
        event_class=classify(b, bt, added, canceled),
        added_before_standard=sum(1 for t in added if t < b),
        added_before_perturbed=len(added),
        canceled_before_standard=sum(1 for t in canceled if t <= b),
        canceled_before_perturbed=len(canceled),
        first_added=added[0] if added else INF,
        first_canceled=canceled[0] if canceled else INF,
        start_state=trace.start_state,
    )


def simulate_pqueue_busy(streams: ReplicaStreams, params: QueueParams, env: EnvironmentModel,
                         spec: PerturbationSpec, x0=None, initial_customers: int = 1,
                         max_events: int = SimulationConfig.max_events) -> float:
    """Busy period of the perturbed queue alone, started with ``initial_customers``"""
    trace = _run_coupled(streams, params, env, spec, x0=x0, initial_customers=initial_customers,
                         track_standard=False, max_events=max_events)
    return trace.b_perturbed


# -- free-running point processes -------------------------------------------------

def sample_point_processes(streams: ReplicaStreams, params: QueueParams, env: EnvironmentModel,
                           spec: PerturbationSpec, horizon: float, x0=None) -> PointProcessLog:
    """All four point processes on [0, horizon], independent of any queue"""
    lam, mu, eps = params.lam, params.mu, params.epsilon
    x0 = env.sample_stationary(streams.environment) if x0 is None else x0
    session = env.path_session(streams.environment, x0)
    add_rate = eps * spec.bound_M if spec.sup_plus > 0 else 0.0
    log = PointProcessLog(horizon=horizon)

    t = streams.arrivals.exponential(lam)
    while t < horizon:
        log.arrivals.append(t)
        t += streams.arrivals.exponential(lam)

    # services and dominating points are merged so the path is read forwards
    t_s = streams.services.exponential(mu)
    t_d = streams.dominating.exponential(add_rate)
    while min(t_s, t_d) < horizon:
        if t_s < t_d:
            log.services.append(t_s)
            mark = streams.marks.uniform()
            if eps > 0 and mark * mu < eps * float(spec.p_minus(session.value_at(t_s))):
                log.canceled.append(t_s)
            t_s += streams.services.exponential(mu)
        else:
            mark = streams.dominating.uniform()
            if mark * spec.bound_M < float(spec.p_plus(session.value_at(t_d))):
                log.added.append(t_d)
            t_d += streams.dominating.exponential(add_rate)
    return log


# -- replica tasks ------------------------------------------------------------------

CLASS_ORDER: Tuple[EventClass, ...] = (
    EventClass.NONE, EventClass.A_PLUS, EventClass.A_PM, EventClass.A_MINUS, EventClass.OTHER,
)


@dataclass(frozen=True)
class CoupledSummaryTask:
    """gap, B, B~, class indicators, gap per class, 1{t1+ < B}, 1{t1- <= B}"""
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    x0: Optional[float] = None
    max_events: int = SimulationConfig.max_events

    @property
    def width(self) -> int:
        return 3 + 2 * len(CLASS_ORDER) + 2

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        s = simulate_coupled_busy(streams, self.params, self.env, self.spec, self.x0, self.max_events)
        gap = s.gap
        onehot = [1.0 if s.event_class is c else 0.0 for c in CLASS_ORDER]
        return ([gap, s.b_standard, s.b_perturbed] + onehot + [gap * o for o in onehot]
                + [float(s.first_added < s.b_standard), float(s.first_canceled <= s.b_standard)])


@dataclass(frozen=True)
class CoupledGapTask:
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    x0: Optional[float] = None
    max_events: int = SimulationConfig.max_events
    width: int = field(default=1, init=False)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        trace = _run_coupled(streams, self.params, self.env, self.spec, x0=self.x0, max_events=self.max_events)
        return [trace.b_standard - trace.b_perturbed]


@dataclass(frozen=True)
class PQueueBusyTask:
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    initial_customers: int = 1
    x0: Optional[float] = None
    max_events: int = SimulationConfig.max_events
    width: int = field(default=1, init=False)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        return [simulate_pqueue_busy(streams, self.params, self.env, self.spec, self.x0,
                                     self.initial_customers, self.max_events)]


@dataclass(frozen=True)
class FirstPointSurvivalTask:
    """1{t1+ >= x} for each x, then 1{t1- >= x} for each x"""
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    points: Tuple[float, ...]

    @property
    def width(self) -> int:
        return 2 * len(self.points)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        log = sample_point_processes(streams, self.params, self.env, self.spec, max(self.points))
        t_plus, t_minus = log.first_added, log.first_canceled
        return [float(t_plus >= x) for x in self.points] + [float(t_minus >= x) for x in self.points]


@dataclass(frozen=True)
class EnvironmentSurvivalTask:
    """exp(-eps int_0^x p+(X)) and prod over service points s < x of (1 - eps p-(X(s))/mu)"""
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    points: Tuple[float, ...]

    @property
    def width(self) -> int:
        return 2 * len(self.points)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        eps, mu = self.params.epsilon, self.params.mu
        xs = sorted(self.points)
        rng = streams.environment

        session = self.env.path_session(rng, self.env.sample_stationary(rng))
        session.value_at(0.0)
        acc, plus = 0.0, {}
        for x in xs:
            acc += session.integral(self.spec.p_plus, x)
            plus[x] = math.exp(-eps * acc)

        session = self.env.path_session(rng, self.env.sample_stationary(rng))
        log_prod, minus = 0.0, {}
        s = streams.services.exponential(mu)
        for x in xs:
            while s < x:
                log_prod += math.log1p(-eps * float(self.spec.p_minus(session.value_at(s))) / mu)
                s += streams.services.exponential(mu)
            minus[x] = math.exp(log_prod)
        return [plus[x] for x in self.points] + [minus[x] for x in self.points]


@dataclass(frozen=True)
class ThinningIntensityTask:
    """Counts of added and canceled points per unit time on a long stationary horizon"""
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    horizon: float
    width: int = field(default=2, init=False)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        log = sample_point_processes(streams, self.params, self.env, self.spec, self.horizon)
        return [len(log.added) / self.horizon, len(log.canceled) / self.horizon]


# -- estimators -----------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledSummary:
    gap: CoefficientEstimate
    mean_standard: CoefficientEstimate
    mean_perturbed: CoefficientEstimate
    class_frequency: Dict[EventClass, CoefficientEstimate]
    class_gap: Dict[EventClass, CoefficientEstimate]     # E((B - B~) 1_A)
    p_added_before_b: CoefficientEstimate
    p_canceled_before_b: CoefficientEstimate
    n_aborted: int


def summarize_coupled(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                      n_replicas: int, seed: int, keys: Sequence[int] = (),
                      config: SimulationConfig = SimulationConfig(), x0=None) -> CoupledSummary:
    validate(spec, params)
    task = CoupledSummaryTask(params, env, spec, x0, config.max_events)
    acc = run_replicas(task, n_replicas, seed, keys=keys, config=config,
                       label=f"coupled eps={params.epsilon:g}").accumulator
    k = len(CLASS_ORDER)
    summary = CoupledSummary(
        gap=acc.component(0),
        mean_standard=acc.component(1),
        mean_perturbed=acc.component(2),
        class_frequency={c: acc.component(3 + i) for i, c in enumerate(CLASS_ORDER)},
        class_gap={c: acc.component(3 + k + i) for i, c in enumerate(CLASS_ORDER)},
        p_added_before_b=acc.component(3 + 2 * k),
        p_canceled_before_b=acc.component(4 + 2 * k),
        n_aborted=acc.n_aborted,
    )
    return summary


def coupled_gap_run(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                    n_replicas: int, seed: int, keys: Sequence[int] = (),
                    config: SimulationConfig = SimulationConfig(), keep_samples: bool = False) -> ReplicaRun:
    """Replica-level gaps B - B~eps under common random numbers"""
    validate(spec, params)
    task = CoupledGapTask(params, env, spec, max_events=config.max_events)
    return run_replicas(task, n_replicas, seed, keys=keys, config=config,
                        label=f"gap eps={params.epsilon:g}", keep_samples=keep_samples)


def estimate_mean_gap(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                      n_replicas: int, seed: int, keys: Sequence[int] = (),
                      config: SimulationConfig = SimulationConfig()) -> CoefficientEstimate:
    """Common-random-numbers estimate of E(B - B~eps)"""
    return coupled_gap_run(params, env, spec, n_replicas, seed, keys, config).accumulator.component(0)


def estimate_pqueue_mean(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                         n_replicas: int, seed: int, initial_customers: int = 1,
                         keys: Sequence[int] = (), config: SimulationConfig = SimulationConfig()) -> CoefficientEstimate:
    validate(spec, params)
    task = PQueueBusyTask(params, env, spec, initial_customers, max_events=config.max_events)
    run = run_replicas(task, n_replicas, seed, keys=keys, config=config,
                       label=f"pqueue n={initial_customers}")
    return run.accumulator.component(0)


def first_point_survival(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                         points: Sequence[float], n_replicas: int, seed: int,
                         config: SimulationConfig = SimulationConfig()) -> Dict[str, List[CoefficientEstimate]]:
    """Simulated P(t1+ >= x), P(t1- >= x) next to their environment-only expressions"""
    points = tuple(float(x) for x in points)
    n = len(points)
    sim = run_replicas(FirstPointSurvivalTask(params, env, spec, points), n_replicas, seed,
                       keys=(10,), config=config, label="first points").accumulator
    ref = run_replicas(EnvironmentSurvivalTask(params, env, spec, points), n_replicas, seed,
                       keys=(11,), config=config, label="environment survival").accumulator
    return {
        "added_simulated": [sim.component(i) for i in range(n)],
        "canceled_simulated": [sim.component(n + i) for i in range(n)],
        "added_environment": [ref.component(i) for i in range(n)],
        "canceled_environment": [ref.component(n + i) for i in range(n)],
    }


def thinning_intensity(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                       horizon: float, n_replicas: int, seed: int,
                       config: SimulationConfig = SimulationConfig()) -> Tuple[CoefficientEstimate, CoefficientEstimate]:
    """Empirical intensities of the added and canceled point processes"""
    acc = run_replicas(ThinningIntensityTask(params, env, spec, horizon), n_replicas, seed,
                       keys=(12,), config=config, label="thinning").accumulator
    return acc.component(0), acc.component(1)


def write_event_log(path: Path, params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                    n_replicas: int, seed: int, keys: Sequence[int] = ()) -> int:
    """Line-delimited record per replica: id, B, B~, class, point counts"""
    written = 0
    with open(path, "w") as fh:
        for r in range(n_replicas):
            streams = ReplicaStreams.from_seed_sequence(replica_seed(seed, r, keys))
            try:
                s = simulate_coupled_busy(streams, params, env, spec)
            except ReplicaAborted as e:
                fh.write(json.dumps({"replica": r, "aborted": e.reason}) + "\n")
                continue
            fh.write(json.dumps({
                "replica": r, "b": s.b_standard, "b_perturbed": s.b_perturbed,
                "class": s.event_class.value,
                "added_before_b": s.added_before_standard, "added": s.added_before_perturbed,
                "canceled_before_b": s.canceled_before_standard, "canceled": s.canceled_before_perturbed,
            }) + "\n")
            written += 1
    logger.info(f"event log: {written} replicas written to {path}")
    return written
