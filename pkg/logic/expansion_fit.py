"""Empirical eps-expansion coefficients from coupled simulation sweeps.

At each eps the common-random-numbers gap E(B - B~eps) is estimated, then the
zero-intercept model gap(eps) = d1 eps + d2 eps^2 is fitted by weighted least
squares through the normal equations. Every grid point replays the same replica
streams, so the point estimates are correlated across eps; a batch bootstrap
that resamples the same replica batches at every point carries that correlation
into the covariance of (d1, d2).
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from config.config import SimulationConfig, SweepConfig
from .bus import bus
from .coupled_sim import coupled_gap_run, estimate_mean_gap
from .environment import EnvironmentModel
from .errors import DomainError, InstabilityError
from .perturbation import PerturbationSpec, validate
from .state.models import CoefficientEstimate, EstimateMethod, QueueParams, SweepResult

logger = logging.getLogger(__name__)

SWEEP_KEYS = (40,)


def rsr_reference(params: QueueParams, spec: PerturbationSpec, eps: float) -> float:
    """Mean busy period of the reduced-rate queue mu + eps E_nu[p]"""
    rate = params.mu + eps * spec.mean_p
    if rate <= params.lam:
        raise InstabilityError(f"reduced-rate queue unstable: {rate:.6g} <= lambda = {params.lam:.6g}")
    return 1.0 / (rate - params.lam)


def rsr_expansion_residual(params: QueueParams, mean_p: float, eps: float) -> float:
    """Reduced-rate mean minus its expansion through eps^2; O(eps^3)"""
    gap, c = params.gap, mean_p
    exact = 1.0 / (gap + eps * c)
    return exact - (1.0 / gap - eps * c / gap ** 2 + eps ** 2 * c ** 2 / gap ** 3)


def fit_through_origin(eps: Sequence[float], means: Sequence[float],
                       stderrs: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Weighted fit of means = d1 eps + d2 eps^2; returns (coeffs, covariance, residuals, chi2)"""
    x = np.asarray(eps, dtype=float)
    y = np.asarray(means, dtype=float)
    se = np.asarray(stderrs, dtype=float)
    if len(np.unique(x[x != 0])) < 2:
        raise DomainError("fit needs at least two distinct non-zero eps values")
    if np.all(y == 0) and np.all(se == 0):
        return np.zeros(2), np.zeros((2, 2)), np.zeros(len(x)), 0.0

    positive = se[se > 0]
    floor = positive.min() if len(positive) else 1.0
    unc = np.where(se > 0, se, floor)

    design = np.column_stack([x, x * x]) / unc[:, None]
    b = y / unc
    alpha = design.T @ design
    beta = design.T @ b
    coeffs = np.linalg.solve(alpha, beta)
    covar = np.linalg.inv(alpha)
    residuals = y - (coeffs[0] * x + coeffs[1] * x * x)
    chi2 = float(np.sum((residuals / unc) ** 2))
    return coeffs, covar, residuals, chi2


def _batch_means(samples: np.ndarray, max_batches: int) -> Tuple[np.ndarray, np.ndarray]:
    batches = np.array_split(samples, min(max_batches, len(samples)))
    return np.array([b.mean() for b in batches]), np.array([len(b) for b in batches], dtype=float)


def bootstrap_covariance(eps: Sequence[float], sample_sets: Sequence[np.ndarray], stderrs: Sequence[float],
                         resamples: int, max_batches: int, seed: int) -> Optional[np.ndarray]:
    """Covariance of (d1, d2) over batch-resampled sweeps.

    Sample set j holds the replica-level gaps at eps[j]; replica i is the same
    stream at every point, so one batch draw is applied to all points at once.
    Aborted replicas leave the sets unaligned; the draws are then made per point.
    """
    if resamples <= 1:
        return None
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    per_point = [_batch_means(np.asarray(s, dtype=float).ravel(), max_batches) for s in sample_sets]
    aligned = len({len(np.asarray(s).ravel()) for s in sample_sets}) == 1
    if not aligned:
        logger.warning("sweep points kept different replica counts; bootstrapping points independently")
    fits = np.empty((resamples, 2))
    for r in range(resamples):
        shared = rng.integers(0, len(per_point[0][0]), len(per_point[0][0])) if aligned else None
        means = []
        for batch_means, sizes in per_point:
            pick = shared if aligned else rng.integers(0, len(batch_means), len(batch_means))
            means.append(float(np.sum(batch_means[pick] * sizes[pick]) / np.sum(sizes[pick])))
        fits[r], *_ = fit_through_origin(eps, means, stderrs)
    return np.cov(fits, rowvar=False)


def _check_grid(params: QueueParams, spec: PerturbationSpec, eps_grid: Sequence[float]) -> Tuple[float, ...]:
    grid = tuple(float(e) for e in eps_grid)
    if any(e <= 0 for e in grid):
        raise DomainError("eps grid values must be positive")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError("eps grid must be strictly increasing")
    for e in grid:
        validate(spec, params.with_epsilon(e))
    return grid


def run_sweep(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec,
              eps_grid: Sequence[float], n_replicas_per_point: int, seed: int,
              simulation: SimulationConfig = SimulationConfig(),
              sweep: SweepConfig = SweepConfig()) -> SweepResult:
    grid = _check_grid(params, spec, eps_grid)
    if len(set(grid)) < 2:
        raise DomainError("sweep needs at least two distinct eps values")
    if n_replicas_per_point < sweep.min_replicas_per_point:
        logger.warning(f"{n_replicas_per_point} replicas per point is below the recommended "
                       f"{sweep.min_replicas_per_point}")

    keep = sweep.bootstrap_resamples > 1
    means, stderrs, sample_sets = [], [], []
    n_aborted = 0
    for j, eps in enumerate(grid):
        run = coupled_gap_run(params.with_epsilon(eps), env, spec, n_replicas_per_point, seed,
                              keys=SWEEP_KEYS, config=simulation, keep_samples=keep)
        est = run.accumulator.component(0)
        means.append(est.value)
        stderrs.append(est.std_error)
        n_aborted += run.n_aborted
        if keep:
            sample_sets.append(run.samples[:, 0])
        bus.emit("sweep:point_done", eps=eps, mean=est.value, std_error=est.std_error, index=j, total=len(grid))
        logger.info(f"sweep eps={eps:g}: gap={est.value:.6g} +/- {est.std_error:.2g}")

    coeffs, covar, residuals, chi2 = fit_through_origin(grid, means, stderrs)
    boot = (bootstrap_covariance(grid, sample_sets, stderrs, sweep.bootstrap_resamples,
                                 sweep.bootstrap_max_batches, seed) if keep else None)
    return SweepResult(
        eps_grid=grid,
        gap_means=tuple(means),
        gap_stderrs=tuple(stderrs),
        d1_hat=float(coeffs[0]),
        d2_hat=float(coeffs[1]),
        covariance=covar,
        bootstrap_covariance=boot,
        residuals=tuple(float(r) for r in residuals),
        chi2=chi2,
        n_replicas_per_point=n_replicas_per_point,
        n_aborted=n_aborted,
    )


def simulated_rsr_gap(params: QueueParams, env: EnvironmentModel, spec: PerturbationSpec, eps: float,
                      n_replicas: int, seed: int, keys: Sequence[int] = (50,),
                      config: SimulationConfig = SimulationConfig()) -> CoefficientEstimate:
    """(E(B^) - E(B~eps)) / eps^2 with E(B^) in closed form and a coupled gap estimate"""
    at = params.with_epsilon(eps)
    gap = estimate_mean_gap(at, env, spec, n_replicas, seed, keys, config)
    offset = rsr_reference(params, spec, eps) - 1.0 / params.gap
    scale = 1.0 / eps ** 2
    return CoefficientEstimate(
        value=(offset + gap.value) * scale,
        std_error=gap.std_error * scale,
        n_replicas=gap.n_replicas,
        method=EstimateMethod.MONTE_CARLO,
        n_aborted=gap.n_aborted,
    )


def fit_estimates(result: SweepResult) -> Tuple[CoefficientEstimate, CoefficientEstimate]:
    n = result.n_replicas_per_point * len(result.eps_grid)
    return (
        CoefficientEstimate(result.d1_hat, result.d1_se, n, EstimateMethod.FIT, result.n_aborted),
        CoefficientEstimate(result.d2_hat, result.d2_se, n, EstimateMethod.FIT, result.n_aborted),
    )
