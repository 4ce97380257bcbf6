"""Expansion coefficients of the mean busy period in eps.

Canonical series: E(B - B~eps) = delta1 eps + delta2 eps^2 + o(eps^2), with
delta2 = a_plus - a_minus. a_plus collects the added-departure scenarios,
a_minus the canceled-departure ones. Inner expectations over the environment
are analytic correlation kernels evaluated at the time lags of simulated
standard busy periods, so every Monte Carlo estimate here is semi-analytic.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config.config import SimulationConfig
from .analytic_mm1 import busy_moments, busy_pgf_laplace, sample_busy_decomposition, sample_busy_period
from .environment import CorrelationKernel, EnvironmentModel
from .errors import DomainError, ReplicaAborted
from .perturbation import PerturbationKernels, PerturbationSpec
from .random_stream import ReplicaStreams
from .runner import ChunkResult, run_replicas
from .state.models import CoefficientEstimate, EstimateMethod, QueueParams

logger = logging.getLogger(__name__)

SEMI = EstimateMethod.SEMI_ANALYTIC_MC


# -- chunked semi-analytic tasks --------------------------------------------------

class _LagTask(ABC):
    """Simulate busy periods, then evaluate kernels on all lags of a chunk at once"""
    width: int
    params: QueueParams
    max_events: int

    @abstractmethod
    def sample(self, streams: ReplicaStreams): ...

    @abstractmethod
    def evaluate(self, samples: list) -> np.ndarray: ...

    def run_chunk(self, seqs) -> ChunkResult:
        samples, reasons = [], {}
        for seq in seqs:
            try:
                samples.append(self.sample(ReplicaStreams.from_seed_sequence(seq)))
            except ReplicaAborted as e:
                reasons[e.reason] = reasons.get(e.reason, 0) + 1
        values = self.evaluate(samples) if samples else np.empty((0, self.width))
        return ChunkResult(values=values, n_aborted=sum(reasons.values()), abort_reasons=reasons)

    def run_replica(self, streams: ReplicaStreams) -> List[float]:
        return list(self.evaluate([self.sample(streams)])[0])


def _owners(sizes: Sequence[int]) -> np.ndarray:
    return np.repeat(np.arange(len(sizes)), sizes)


def _per_replica(owner: np.ndarray, values, n: int) -> np.ndarray:
    return np.bincount(owner, weights=np.asarray(values, dtype=float), minlength=n)


@dataclass(frozen=True)
class APlusTask(_LagTask):
    """(W_pp(B), sum_i sum_j [R_pm(D_j^i) + R_mp(A_i - D_j^i)]) from one decomposition"""
    params: QueueParams
    kernels: PerturbationKernels
    max_events: int = SimulationConfig.max_events
    width: int = field(default=2, init=False)

    def sample(self, streams):
        dec = sample_busy_decomposition(streams, self.params, self.max_events)
        horizons = dec.remaining_horizons()
        deps = [sub.departures for sub in dec.sub_busy_periods]
        sizes = [len(d) for d in deps]
        d = np.concatenate(deps) if deps else np.empty(0)
        a = np.repeat(horizons, sizes) if deps else np.empty(0)
        return dec.length, d, a

    def evaluate(self, samples):
        n = len(samples)
        b = np.array([s[0] for s in samples])
        owner = _owners([len(s[1]) for s in samples])
        d = np.concatenate([s[1] for s in samples])
        a = np.concatenate([s[2] for s in samples])
        k = self.kernels
        first = k.pp.weighted_integral(b)
        second = _per_replica(owner, k.pm.integral(d) + k.mp.integral(a - d), n) if len(d) else np.zeros(n)
        return np.column_stack([first, second])


@dataclass(frozen=True)
class AMinusTask(_LagTask):
    """(sum_i [R_pm(D_i) + R_mp(B + T1 - D_i)], sum_i sum_k r_mm(B - D_i + D'_k)) from two busy periods"""
    params: QueueParams
    kernels: PerturbationKernels
    max_events: int = SimulationConfig.max_events
    width: int = field(default=2, init=False)

    def sample(self, streams):
        first = sample_busy_period(streams, self.params, max_events=self.max_events)
        second = sample_busy_period(streams, self.params, max_events=self.max_events)
        return first.length, first.departures, second.length, second.departures

    def evaluate(self, samples):
        n = len(samples)
        k = self.kernels
        owner = _owners([len(s[1]) for s in samples])
        b = np.repeat([s[0] for s in samples], [len(s[1]) for s in samples])
        t1 = np.repeat([s[2] for s in samples], [len(s[1]) for s in samples])
        d = np.concatenate([s[1] for s in samples])
        cross = _per_replica(owner, k.pm.integral(d) + k.mp.integral(b + t1 - d), n)
        pairs = [np.add.outer(s[0] - s[1], s[3]).ravel() for s in samples]
        pair_owner = _owners([len(p) for p in pairs])
        same = _per_replica(pair_owner, k.mm.at(np.concatenate(pairs)), n)
        return np.column_stack([cross, same])


@dataclass(frozen=True)
class WeightedBusyTask(_LagTask):
    """W(B) = int_0^B (B - v) r(v) dv for one kernel"""
    params: QueueParams
    kernel: CorrelationKernel
    max_events: int = SimulationConfig.max_events
    width: int = field(default=1, init=False)

    def sample(self, streams):
        return sample_busy_period(streams, self.params, max_events=self.max_events).length

    def evaluate(self, samples):
        return np.asarray(self.kernel.weighted_integral(np.asarray(samples, dtype=float))).reshape(-1, 1)


@dataclass(frozen=True)
class DeparturePairTask(_LagTask):
    """sum_i sum_k r(B - D_i + D'_k) over two independent busy periods"""
    params: QueueParams
    kernel: CorrelationKernel
    max_events: int = SimulationConfig.max_events
    width: int = field(default=1, init=False)

    def sample(self, streams):
        first = sample_busy_period(streams, self.params, max_events=self.max_events)
        second = sample_busy_period(streams, self.params, max_events=self.max_events)
        return np.add.outer(first.length - first.departures, second.departures).ravel()

    def evaluate(self, samples):
        owner = _owners([len(s) for s in samples])
        return _per_replica(owner, self.kernel.at(np.concatenate(samples)), len(samples)).reshape(-1, 1)


# -- closed forms ----------------------------------------------------------------------

def _closed(value: float) -> CoefficientEstimate:
    return CoefficientEstimate.closed(value)


def delta1(params: QueueParams, spec: PerturbationSpec) -> CoefficientEstimate:
    """E_nu[p] / (mu - lambda)^2"""
    return _closed(spec.mean_p / params.gap ** 2)


def first_order_split(params: QueueParams, spec: PerturbationSpec) -> Dict[str, CoefficientEstimate]:
    """Added and canceled contributions to delta1 and the slopes of P(t1+ < B) and P(t1- <= B) in eps"""
    gap = params.gap
    return {
        "delta1_added": _closed(spec.mean_p_plus / gap ** 2),
        "delta1_canceled": _closed(-spec.mean_p_minus / gap ** 2),
        "slope_first_added": _closed(spec.mean_p_plus / gap),
        "slope_first_canceled": _closed(spec.mean_p_minus / gap),
    }


def constant_delta2(params: QueueParams, mean_p: float) -> float:
    """-E_nu[p]^2 / (mu - lambda)^3, the eps^2 coefficient of the reduced-rate queue"""
    return -mean_p ** 2 / params.gap ** 3


def fast_env_limit(params: QueueParams, spec: PerturbationSpec) -> CoefficientEstimate:
    """delta2 of an infinitely accelerated environment"""
    return _closed(constant_delta2(params, spec.mean_p))


def delta2_exponential(alpha: float, var_p: float, params: QueueParams) -> CoefficientEstimate:
    """Second-order reduced-rate gap for C_p(u) = var_p exp(-alpha u); alpha = 0 is the limit"""
    if alpha < 0:
        raise DomainError(f"alpha must be non-negative, got {alpha}")
    if var_p < 0:
        raise DomainError("variance must be non-negative")
    if alpha == 0:
        return _closed(-var_p / params.gap ** 3)
    e_b = busy_moments(params).E_B
    phi = busy_pgf_laplace(1.0, alpha, params)
    inner = e_b / alpha - 1.0 / alpha ** 2 + phi / alpha ** 2
    return _closed(-(var_p / params.mu) * inner)


# -- semi-analytic Monte Carlo ------------------------------------------------------------

def a_plus_terms(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                 n_replicas: int, seed: int, keys: Sequence[int] = (20,),
                 config: SimulationConfig = SimulationConfig(),
                 shortcuts: bool = True) -> Dict[str, CoefficientEstimate]:
    """Pieces of a_plus: the added-departure pair term and the added-then-canceled term"""
    if spec.sup_plus == 0.0:
        zero = _closed(0.0)
        return {"added_pair": zero, "added_then_canceled": zero, "total": zero}
    rho, mu = params.rho, params.mu
    if shortcuts and spec.is_constant:
        value = -spec.mean_p_plus ** 2 / (mu ** 3 * (1.0 - rho) ** 3)
        return {"added_pair": _closed(value), "added_then_canceled": _closed(0.0), "total": _closed(value)}
    kernels = PerturbationKernels.build(spec, env)
    acc = run_replicas(APlusTask(params, kernels, config.max_events), n_replicas, seed,
                       keys=keys, config=config, label="a_plus").accumulator
    w1, w2 = -1.0 / mu, -1.0 / (mu ** 2 * (1.0 - rho))
    return {
        "added_pair": acc.estimate([w1, 0.0], SEMI),
        "added_then_canceled": acc.estimate([0.0, w2], SEMI),
        "total": acc.estimate([w1, w2], SEMI),
    }


def a_plus(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec, n_replicas: int, seed: int,
           keys: Sequence[int] = (20,), config: SimulationConfig = SimulationConfig(),
           shortcuts: bool = True) -> CoefficientEstimate:
    return a_plus_terms(params, env, spec, n_replicas, seed, keys, config, shortcuts)["total"]


def a_minus_terms(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                  n_replicas: int, seed: int, keys: Sequence[int] = (21,),
                  config: SimulationConfig = SimulationConfig(),
                  shortcuts: bool = True) -> Dict[str, CoefficientEstimate]:
    """Pieces of a_minus: the canceled-then-added term and the canceled pair term"""
    if spec.sup_minus == 0.0:
        zero = _closed(0.0)
        return {"canceled_then_added": zero, "canceled_pair": zero, "total": zero}
    rho, mu = params.rho, params.mu
    if shortcuts and spec.is_constant:
        value = spec.mean_p_minus ** 2 / (mu ** 3 * (1.0 - rho) ** 3)
        return {"canceled_then_added": _closed(0.0), "canceled_pair": _closed(value), "total": _closed(value)}
    kernels = PerturbationKernels.build(spec, env)
    acc = run_replicas(AMinusTask(params, kernels, config.max_events), n_replicas, seed,
                       keys=keys, config=config, label="a_minus").accumulator
    scale = 1.0 / (mu ** 2 * (1.0 - rho))
    return {
        "canceled_then_added": acc.estimate([-scale, 0.0], SEMI),
        "canceled_pair": acc.estimate([0.0, scale / mu], SEMI),
        "total": acc.estimate([-scale, scale / mu], SEMI),
    }


def a_minus(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec, n_replicas: int, seed: int,
            keys: Sequence[int] = (21,), config: SimulationConfig = SimulationConfig(),
            shortcuts: bool = True) -> CoefficientEstimate:
    return a_minus_terms(params, env, spec, n_replicas, seed, keys, config, shortcuts)["total"]


def delta2(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec, n_replicas: int, seed: int,
           keys: Sequence[int] = (), config: SimulationConfig = SimulationConfig(),
           shortcuts: bool = True) -> CoefficientEstimate:
    """a_plus - a_minus, the eps^2 coefficient of E(B - B~eps)"""
    if shortcuts and spec.is_constant:
        return _closed(constant_delta2(params, spec.mean_p))
    keys = tuple(keys)
    plus = a_plus(params, env, spec, n_replicas, seed, keys + (20,), config, shortcuts)
    minus = a_minus(params, env, spec, n_replicas, seed, keys + (21,), config, shortcuts)
    return plus.minus(minus)


def covariance_integral(params: QueueParams, kernel: CorrelationKernel, n_replicas: int, seed: int,
                        keys: Sequence[int] = (22,), config: SimulationConfig = SimulationConfig()) -> CoefficientEstimate:
    """-(1/mu) E(int_0^B (B - v) r(v) dv) over standard busy periods"""
    acc = run_replicas(WeightedBusyTask(params, kernel, config.max_events), n_replicas, seed,
                       keys=keys, config=config, label="covariance integral").accumulator
    return acc.estimate([1.0], SEMI, scale=-1.0 / params.mu)


def delta2_covariance(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                      n_replicas: int, seed: int, keys: Sequence[int] = (22,),
                      config: SimulationConfig = SimulationConfig(), shortcuts: bool = True) -> CoefficientEstimate:
    """Covariance form of delta2 for non-negative perturbations"""
    spec.require_sign("nonneg")
    mean_term = constant_delta2(params, spec.mean_p)
    if shortcuts and spec.is_constant:
        return _closed(mean_term)
    return covariance_integral(params, env.covariance_kernel(spec.p), n_replicas, seed, keys, config).shifted(mean_term)


def rsr_gap(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec, side: str,
            n_replicas: int, seed: int, keys: Sequence[int] = (23,),
            config: SimulationConfig = SimulationConfig(), shortcuts: bool = True) -> CoefficientEstimate:
    """eps^-2 limit of E(B^ - B~eps), B^ the busy period at rate mu + eps E_nu[p]"""
    spec.require_sign(side)
    if spec.is_zero or (shortcuts and spec.is_constant):
        return _closed(0.0)
    cov = env.covariance_kernel(spec.p)
    if side == "nonneg":
        return covariance_integral(params, cov, n_replicas, seed, keys, config)
    mu, rho = params.mu, params.rho
    acc = run_replicas(DeparturePairTask(params, cov, config.max_events), n_replicas, seed,
                       keys=keys, config=config, label="rsr pairs").accumulator
    return acc.estimate([1.0], SEMI, scale=-1.0 / (mu ** 3 * (1.0 - rho)))


def fast_env_sweep(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
                   alphas: Sequence[float], n_replicas: int, seed: int,
                   config: SimulationConfig = SimulationConfig(),
                   shortcuts: bool = True) -> List[Tuple[float, CoefficientEstimate]]:
    """delta2 of the environment accelerated by each alpha"""
    out = []
    for j, alpha in enumerate(alphas):
        scaled = env.time_scale(alpha)
        estimate = delta2(params, scaled, spec, n_replicas, seed, keys=(30, j), config=config, shortcuts=shortcuts)
        logger.info(f"fast environment alpha={alpha:g}: delta2={estimate.value:.6g} +/- {estimate.std_error:.2g}")
        out.append((float(alpha), estimate))
    return out


def exponential_decay_curve(params: QueueParams, var_p: float, alphas: Sequence[float]) -> List[Tuple[float, float]]:
    return [(float(a), delta2_exponential(a, var_p, params).value) for a in alphas]


def is_concave_nondecreasing(xs: Sequence[float], ys: Sequence[float], tol: float = 1e-12) -> bool:
    """Finite-difference shape check on an increasing grid"""
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slopes = np.diff(y) / np.diff(x)
    return bool(np.all(slopes >= -tol) and np.all(np.diff(slopes) <= tol))
