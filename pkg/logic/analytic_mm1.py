"""Closed forms and exact samplers for the standard M/M/1 busy period.

These serve as the oracle layer: every perturbed quantity reduces to one of them
when the perturbation vanishes or is constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import integrate, special, stats

from config.config import QuadratureConfig, SimulationConfig
from .errors import DomainError, ReplicaAborted
from .random_stream import ReplicaStreams
from .runner import run_replicas
from .state.models import (
    BusyDecomposition,
    BusyMoments,
    BusyPeriodRealization,
    CoefficientEstimate,
    QueueParams,
)

logger = logging.getLogger(__name__)


# -- closed forms -----------------------------------------------------------

def busy_moments(params: QueueParams) -> BusyMoments:
    lam, mu, rho = params.lam, params.mu, params.rho
    gap = params.gap
    return BusyMoments(
        E_B=1.0 / gap,
        E_B2=2.0 / (mu ** 2 * (1.0 - rho) ** 3),
        E_N=1.0 / (1.0 - rho),
        E_NB=(1.0 + rho) / (mu * (1.0 - rho) ** 3),
        E_NN1=2.0 * mu ** 2 * lam / gap ** 3,
        E_D=mu ** 2 / gap ** 3,
    )


def _phi(z, xi, params: QueueParams):
    rho, mu = params.rho, params.mu
    s = 1.0 + rho + np.asarray(xi, dtype=float) / mu
    return (s - np.sqrt(s * s - 4.0 * rho * np.asarray(z, dtype=float))) / (2.0 * rho)


def busy_pgf_laplace(z, xi, params: QueueParams):
    """Joint transform E(z^N exp(-xi B)) of the busy period"""
    z_arr, xi_arr = np.asarray(z, dtype=float), np.asarray(xi, dtype=float)
    if np.any(np.abs(z_arr) > 1.0):
        raise DomainError(f"|z| must not exceed 1, got {z}")
    if np.any(xi_arr < 0):
        raise DomainError(f"xi must be non-negative, got {xi}")
    value = _phi(z_arr, xi_arr, params)
    return float(value) if value.ndim == 0 else value


def busy_laplace_derivative(xi: float, params: QueueParams, step: float = 1e-5) -> float:
    """Central difference of xi -> phi(1, xi); at xi = 0 this is -E(B)"""
    h = step * (1.0 + abs(xi))
    # the radicand stays positive slightly left of 0, so the stencil may cross it
    return float((_phi(1.0, xi + h, params) - _phi(1.0, xi - h, params)) / (2.0 * h))


def catalan(n: int) -> int:
    return special.comb(2 * n, n, exact=True) // (n + 1)


def interleave_probability(n: int) -> float:
    """Probability that n-1 ordered uniform arrivals interleave n-1 ordered departures"""
    if n < 1:
        raise DomainError("n must be at least 1")
    return catalan(n - 1) / special.comb(2 * n - 2, n - 1, exact=True)


def busy_count_density(n: int, t: float, params: QueueParams) -> float:
    """Density in t of P(B < t, N = n)"""
    if n < 1 or t <= 0:
        raise DomainError("busy_count_density needs n >= 1 and t > 0")
    lam, mu = params.lam, params.mu
    return float(
        stats.poisson.pmf(n - 1, lam * t)
        * mu * stats.poisson.pmf(n - 1, mu * t)
        * interleave_probability(n)
    )


def busy_count_pmf(n: int, params: QueueParams) -> float:
    """P(N = n), the time integral of busy_count_density"""
    if n < 1:
        raise DomainError("n must be at least 1")
    lam, mu = params.lam, params.mu
    m = n - 1
    log_catalan = special.gammaln(2 * m + 1) - special.gammaln(m + 1) - special.gammaln(m + 2)
    log_p = log_catalan + m * math.log(lam) + n * math.log(mu) - (2 * n - 1) * math.log(lam + mu)
    return float(math.exp(log_p))


def busy_density(t, params: QueueParams):
    """Density of B through the modified Bessel function I1"""
    lam, mu = params.lam, params.mu
    t = np.asarray(t, dtype=float)
    root = 2.0 * math.sqrt(lam * mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        # ive(1, x) = I1(x) exp(-x)
        value = (math.sqrt(mu / lam) / t) * np.exp(-(lam + mu - root) * t) * special.ive(1, root * t)
    value = np.where(t > 0, value, np.where(t == 0, mu, 0.0))
    return float(value) if value.ndim == 0 else value


def busy_survival(u: float, params: QueueParams, quad: QuadratureConfig = QuadratureConfig()) -> float:
    """P(B >= u)"""
    if u <= 0:
        return 1.0
    value, _ = integrate.quad(lambda t: busy_density(t, params), u, np.inf,
                              epsabs=quad.quad_epsabs, limit=quad.quad_limit)
    return float(min(max(value, 0.0), 1.0))


def z_density(x: float, params: QueueParams, quad: QuadratureConfig = QuadratureConfig()) -> float:
    """Normalized density of Z, proportional to the integrated tail of B"""
    if x < 0:
        return 0.0
    # int_x^inf P(B >= u) du = E((B - x)^+)
    tail, _ = integrate.quad(lambda t: (t - x) * busy_density(t, params), x, np.inf,
                             epsabs=quad.quad_epsabs, limit=quad.quad_limit)
    return float(2.0 * tail / busy_moments(params).E_B2)


def z_laplace(alpha: float, params: QueueParams) -> float:
    """E(exp(-alpha Z))"""
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    if alpha == 0:
        return 1.0
    m = busy_moments(params)
    return float((alpha * m.E_B - 1.0 + _phi(1.0, alpha, params)) / (alpha * alpha * m.E_B2 / 2.0))


def z_normalization_gap(params: QueueParams) -> float:
    """Total mass minus one of the tail density taken with constant 1/(mu (1-rho)^2)"""
    rho = params.rho
    printed_mass = busy_moments(params).E_B2 / 2.0 / (params.mu * (1.0 - rho) ** 2)
    return float(printed_mass - 1.0)


def equilibrium_laplace(alpha: float, laplace_value: float, mean: float) -> float:
    """Transform of the equilibrium (integrated tail) law of a variable A"""
    if alpha <= 0 or mean <= 0:
        raise DomainError("alpha and mean must be positive")
    return (1.0 - laplace_value) / (alpha * mean)


# -- samplers ---------------------------------------------------------------

def sample_busy_period(streams: ReplicaStreams, params: QueueParams, initial_customers: int = 1,
                       max_events: int = SimulationConfig.max_events) -> BusyPeriodRealization:
    """Direct event simulation of one busy period started with ``initial_customers``"""
    if initial_customers < 1:
        raise DomainError("initial_customers must be at least 1")
    arrivals_stream, services_stream = streams.arrivals, streams.services
    lam, mu = params.lam, params.mu
    t_arrival = arrivals_stream.exponential(lam)
    t_service = services_stream.exponential(mu)
    level = initial_customers
    arrivals: List[float] = []
    departures: List[float] = []
    events = 0
    while level > 0:
        events += 1
        if events > max_events:
            raise ReplicaAborted("event_cap", events)
        if t_arrival < t_service:
            arrivals.append(t_arrival)
            level += 1
            t_arrival += arrivals_stream.exponential(lam)
        else:
            departures.append(t_service)
            level -= 1
            t_service += services_stream.exponential(mu)
    return BusyPeriodRealization(
        length=departures[-1],
        departures=np.asarray(departures),
        arrivals=np.asarray(arrivals),
        initial_customers=initial_customers,
    )


def sample_busy_decomposition(streams: ReplicaStreams, params: QueueParams,
                              max_events: int = SimulationConfig.max_events) -> BusyDecomposition:
    """Busy period rebuilt from the returns of the queue to a single customer.

    The first customer leaves after H arrivals have interrupted it; each arrival
    opens a sub-busy period distributed as B. Gaps between clock events are
    exponential with rate lambda + mu.
    """
    lam, mu = params.lam, params.mu
    marks = streams.marks
    h = marks.geometric_failures(mu / (lam + mu))
    gaps = np.array([marks.exponential(lam + mu) for _ in range(h + 1)])
    subs = tuple(sample_busy_period(streams, params, max_events=max_events) for _ in range(h))
    cycle_ends = np.zeros(h + 1)
    for i, sub in enumerate(subs, start=1):
        cycle_ends[i] = cycle_ends[i - 1] + gaps[i] + sub.length
    return BusyDecomposition(initial_gaps=gaps, sub_busy_periods=subs, cycle_ends=cycle_ends)


# -- Monte Carlo functionals ------------------------------------------------

FUNCTIONAL_NAMES: Tuple[str, ...] = ("E_B", "E_B2", "E_N", "E_NB", "E_NN1", "E_D")


@dataclass(frozen=True)
class BusyFunctionalTask:
    """Per-replica (B, B^2, N, NB, N(N-1), D, exp(-xi B)...)"""
    params: QueueParams
    laplace_points: Tuple[float, ...] = (1.0,)
    initial_customers: int = 1
    max_events: int = SimulationConfig.max_events

    @property
    def width(self) -> int:
        return len(FUNCTIONAL_NAMES) + len(self.laplace_points)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        bp = sample_busy_period(streams, self.params, self.initial_customers, self.max_events)
        b, n = bp.length, bp.n_services
        row = [b, b * b, n, n * b, n * (n - 1), bp.departure_sum]
        row.extend(math.exp(-xi * b) for xi in self.laplace_points)
        return row


@dataclass(frozen=True)
class DecompositionTask:
    """Per-replica (H, reassembled B, its square)"""
    params: QueueParams
    max_events: int = SimulationConfig.max_events
    width: int = field(default=3, init=False)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        dec = sample_busy_decomposition(streams, self.params, self.max_events)
        b = dec.length
        return [dec.h, b, b * b]


def busy_functional_estimates(params: QueueParams, n_replicas: int, seed: int,
                              config: SimulationConfig = SimulationConfig(),
                              laplace_points: Sequence[float] = (1.0,),
                              initial_customers: int = 1,
                              keys: Sequence[int] = (0,)) -> Dict[str, CoefficientEstimate]:
    """Monte Carlo estimates of the busy-period functionals, keyed like BusyMoments"""
    task = BusyFunctionalTask(params, tuple(laplace_points), initial_customers, config.max_events)
    run = run_replicas(task, n_replicas, seed, keys=keys, config=config, label="busy_functionals")
    acc = run.accumulator
    names = list(FUNCTIONAL_NAMES) + [f"laplace_{xi:g}" for xi in laplace_points]
    return {name: acc.component(i) for i, name in enumerate(names)}


def decomposition_estimates(params: QueueParams, n_replicas: int, seed: int,
                            config: SimulationConfig = SimulationConfig(),
                            keys: Sequence[int] = (1,)) -> Dict[str, CoefficientEstimate]:
    task = DecompositionTask(params, config.max_events)
    acc = run_replicas(task, n_replicas, seed, keys=keys, config=config, label="decomposition").accumulator
    return {name: acc.component(i) for i, name in enumerate(("E_H", "E_B", "E_B2"))}
