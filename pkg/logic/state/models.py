from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from ..errors import InstabilityError, ValidationError


@dataclass(frozen=True)
class QueueParams:
    lam: float
    mu: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.lam > 0 or not self.mu > 0:
            raise ValidationError("Arrival and service rates must be positive")
        if self.lam >= self.mu:
            raise InstabilityError(
                f"Unstable queue: lambda={self.lam} must be below mu={self.mu}"
            )
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    @property
    def gap(self) -> float:
        """mu - lambda"""
        return self.mu - self.lam

    def with_epsilon(self, epsilon: float) -> QueueParams:
        return replace(self, epsilon=epsilon)


@dataclass(frozen=True)
class BusyMoments:
    E_B: float
    E_B2: float
    E_N: float
    E_NB: float
    E_NN1: float
    E_D: float

    def as_dict(self) -> dict:
        return {
            "E_B": self.E_B, "E_B2": self.E_B2, "E_N": self.E_N,
            "E_NB": self.E_NB, "E_NN1": self.E_NN1, "E_D": self.E_D,
        }


@dataclass(frozen=True)
class BusyPeriodRealization:
    length: float
    departures: np.ndarray            # D_1 < ... < D_N, D_N == length
    arrivals: np.ndarray              # A_2 <= ... <= A_N
    initial_customers: int = 1

    @property
    def n_services(self) -> int:
        return len(self.departures)

    @property
    def departure_sum(self) -> float:
        return float(self.departures.sum())

    def check(self) -> None:
        """Bookkeeping and interleaving conditions of a busy period"""
        d, a = self.departures, self.arrivals
        n0 = self.initial_customers
        if len(d) != len(a) + n0:
            raise ValueError("n_services must equal arrivals + initial customers")
        if d[-1] != self.length:
            raise ValueError("last departure must close the busy period")
        if np.any(np.diff(d) <= 0):
            raise ValueError("departures must be strictly increasing")
        # the k-th arrival must precede departure k + n0 - 1
        if len(a) and np.any(a > d[n0 - 1:-1]):
            raise ValueError("arrival A_{k+1} after departure D_k")


@dataclass(frozen=True)
class BusyDecomposition:
    """Busy period split at the returns of the queue to one customer"""
    initial_gaps: np.ndarray                          # E_0, E_1, ..., E_H
    sub_busy_periods: Tuple[BusyPeriodRealization, ...]
    cycle_ends: np.ndarray                            # s_0 = 0, s_1, ..., s_H

    @property
    def h(self) -> int:
        return len(self.sub_busy_periods)

    @property
    def length(self) -> float:
        return float(self.cycle_ends[-1] + self.initial_gaps[0])

    def sub_starts(self) -> np.ndarray:
        """s_{i-1} + E_i, the start of each sub-busy period"""
        return self.cycle_ends[:-1] + self.initial_gaps[1:]

    def remaining_horizons(self) -> np.ndarray:
        """A_i = B - (s_{i-1} + E_i)"""
        return self.length - self.sub_starts()


class EventClass(Enum):
    NONE = "none"
    A_PLUS = "a_plus"
    A_PM = "a_pm"
    A_MINUS = "a_minus"
    OTHER = "other"


@dataclass
class PointProcessLog:
    horizon: float
    arrivals: List[float] = field(default_factory=list)
    services: List[float] = field(default_factory=list)
    added: List[float] = field(default_factory=list)
    canceled: List[float] = field(default_factory=list)

    @property
    def first_added(self) -> float:
        return self.added[0] if self.added else float("inf")

    @property
    def first_canceled(self) -> float:
        return self.canceled[0] if self.canceled else float("inf")


@dataclass(frozen=True)
class BusyPeriodSample:
    b_standard: float
    b_perturbed: float
    event_class: EventClass
    added_before_standard: int
    added_before_perturbed: int
    canceled_before_standard: int
    canceled_before_perturbed: int
    first_added: float
    first_canceled: float
    start_state: object

    @property
    def gap(self) -> float:
        """B - B~eps"""
        return self.b_standard - self.b_perturbed


class EstimateMethod(Enum):
    CLOSED_FORM = "closed_form"
    SEMI_ANALYTIC_MC = "semi_analytic_mc"
    MONTE_CARLO = "monte_carlo"
    FIT = "fit"


@dataclass(frozen=True)
class CoefficientEstimate:
    value: float
    std_error: float = 0.0
    n_replicas: int = 0
    method: EstimateMethod = EstimateMethod.CLOSED_FORM
    n_aborted: int = 0

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be non-negative")
        if self.method is EstimateMethod.CLOSED_FORM and self.std_error != 0:
            raise ValueError("closed forms carry no standard error")

    @classmethod
    def closed(cls, value: float) -> CoefficientEstimate:
        return cls(value=float(value))

    def __neg__(self) -> CoefficientEstimate:
        return replace(self, value=-self.value)

    def minus(self, other: CoefficientEstimate) -> CoefficientEstimate:
        """Difference of independent estimates with propagated standard error"""
        methods = {self.method, other.method}
        if methods == {EstimateMethod.CLOSED_FORM}:
            method = EstimateMethod.CLOSED_FORM
        elif EstimateMethod.MONTE_CARLO in methods:
            method = EstimateMethod.MONTE_CARLO
        else:
            method = EstimateMethod.SEMI_ANALYTIC_MC
        return CoefficientEstimate(
            value=self.value - other.value,
            std_error=float(np.hypot(self.std_error, other.std_error)),
            n_replicas=self.n_replicas + other.n_replicas,
            method=method,
            n_aborted=self.n_aborted + other.n_aborted,
        )

    def shifted(self, offset: float) -> CoefficientEstimate:
        return replace(self, value=self.value + offset)

    def within(self, target: float, n_se: float = 3.0, floor: float = 0.0) -> bool:
        return abs(self.value - target) <= n_se * self.std_error + floor


@dataclass(frozen=True)
class SweepResult:
    eps_grid: Tuple[float, ...]
    gap_means: Tuple[float, ...]
    gap_stderrs: Tuple[float, ...]
    d1_hat: float
    d2_hat: float
    covariance: np.ndarray
    bootstrap_covariance: Optional[np.ndarray]
    residuals: Tuple[float, ...]
    chi2: float
    n_replicas_per_point: int
    n_aborted: int = 0

    @property
    def fit_covariance(self) -> np.ndarray:
        """Bootstrap covariance when available; the weighted-fit one treats grid points as independent"""
        return self.bootstrap_covariance if self.bootstrap_covariance is not None else self.covariance

    @property
    def d1_se(self) -> float:
        return float(np.sqrt(self.fit_covariance[0, 0]))

    @property
    def d2_se(self) -> float:
        return float(np.sqrt(self.fit_covariance[1, 1]))

    def fitted(self, eps: float) -> float:
        return self.d1_hat * eps + self.d2_hat * eps * eps

    @property
    def max_scaled_residual(self) -> float:
        """max |residual| / eps^3 over the grid"""
        return max(abs(r) / e ** 3 for r, e in zip(self.residuals, self.eps_grid))
