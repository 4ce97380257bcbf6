import os
import sys

import numpy as np
import pytest

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config.config import SimulationConfig, SweepConfig
from logic.bus import bus
from logic.coupled_sim import estimate_mean_gap
from logic.environment import FiniteCtmcEnvironment
from logic.errors import DomainError, H2ViolationError, InstabilityError
from logic.expansion_fit import (
    SWEEP_KEYS,
    bootstrap_covariance,
    fit_estimates,
    fit_through_origin,
    rsr_expansion_residual,
    rsr_reference,
    run_sweep,
    simulated_rsr_gap,
)
from logic.perturbation import PerturbationSpec, constant_perturbation
from logic.state.models import EstimateMethod, QueueParams

ENV = FiniteCtmcEnvironment.two_state(1.0)
PARAMS = QueueParams(lam=1.0, mu=2.0)
SERIAL = SimulationConfig(workers=1, chunk_size=500)
QUICK_SWEEP = SweepConfig(bootstrap_resamples=100, bootstrap_max_batches=50, min_replicas_per_point=10)


def test_fit_recovers_exact_quadratic():
    eps = [0.01, 0.02, 0.05, 0.1]
    means = [0.5 * e - 0.3 * e * e for e in eps]
    coeffs, covar, residuals, chi2 = fit_through_origin(eps, means, [1e-3] * 4)
    assert coeffs == pytest.approx([0.5, -0.3])
    assert np.abs(residuals).max() < 1e-12
    assert chi2 == pytest.approx(0.0, abs=1e-12)
    assert covar.shape == (2, 2)


def test_fit_weights_by_standard_error():
    eps = [0.1, 0.2, 0.3]
    means = [0.1, 0.2, 10.0]
    precise, *_ = fit_through_origin(eps, means, [1e-4, 1e-4, 1e3])
    assert precise[0] == pytest.approx(1.0, abs=1e-2)


def test_fit_needs_two_distinct_eps():
    with pytest.raises(DomainError):
        fit_through_origin([0.1, 0.1], [1.0, 1.0], [0.1, 0.1])


def test_fit_of_zero_data_is_zero():
    coeffs, covar, residuals, chi2 = fit_through_origin([0.1, 0.2], [0.0, 0.0], [0.0, 0.0])
    assert coeffs.tolist() == [0.0, 0.0]
    assert chi2 == 0.0


def test_rsr_reference_and_expansion_residual():
    spec = constant_perturbation(1.0, ENV)
    assert rsr_reference(PARAMS, spec, 0.5) == pytest.approx(1.0 / 1.5)
    for eps in (0.01, 0.02):
        assert rsr_expansion_residual(PARAMS, 1.0, eps) / eps ** 3 == pytest.approx(-1.0, rel=0.05)
    with pytest.raises(InstabilityError):
        rsr_reference(PARAMS, constant_perturbation(-1.0, ENV), 1.5)


def test_bootstrap_is_seeded():
    rng = np.random.default_rng(0)
    eps = [0.1, 0.2, 0.3]
    sets = [e + 0.1 * rng.standard_normal(400) for e in eps]
    se = [s.std(ddof=1) / np.sqrt(len(s)) for s in sets]
    first = bootstrap_covariance(eps, sets, se, resamples=30, max_batches=40, seed=3)
    again = bootstrap_covariance(eps, sets, se, resamples=30, max_batches=40, seed=3)
    assert np.array_equal(first, again)
    assert first.shape == (2, 2)
    assert np.all(np.linalg.eigvalsh(first) >= -1e-15)
    assert bootstrap_covariance(eps, sets, se, resamples=1, max_batches=40, seed=3) is None


def test_sweep_grid_checks():
    spec = PerturbationSpec.table([0.0, 1.0], ENV)
    with pytest.raises(DomainError):
        run_sweep(PARAMS, ENV, spec, [0.2, 0.1], 10, seed=0, simulation=SERIAL, sweep=QUICK_SWEEP)
    with pytest.raises(DomainError):
        run_sweep(PARAMS, ENV, spec, [0.0, 0.1], 10, seed=0, simulation=SERIAL, sweep=QUICK_SWEEP)
    with pytest.raises(H2ViolationError):
        run_sweep(PARAMS, ENV, spec, [0.1, 2.5], 10, seed=0, simulation=SERIAL, sweep=QUICK_SWEEP)


def test_constant_sweep_recovers_first_order():
    """p = 1: E(B - B~eps) = 1 - 1/(1 + eps), so d1 = 1 and d2 = -1."""
    spec = constant_perturbation(1.0, ENV)
    points = []
    bus.on("sweep:point_done", lambda **kw: points.append(kw["eps"]))
    try:
        result = run_sweep(PARAMS, ENV, spec, (0.05, 0.1, 0.15, 0.2), 4000, seed=1,
                           simulation=SERIAL, sweep=QUICK_SWEEP)
    finally:
        bus.clear()
    assert points == [0.05, 0.1, 0.15, 0.2]
    d1, d2 = fit_estimates(result)
    assert d1.method is EstimateMethod.FIT
    assert d1.within(1.0, n_se=4.0)
    assert d2.within(-1.0, n_se=4.0)
    assert result.bootstrap_covariance is not None
    assert len(result.residuals) == 4
    assert result.fitted(0.1) == pytest.approx(result.d1_hat * 0.1 + result.d2_hat * 0.01)


def test_simulated_rsr_gap_for_constant_perturbation_is_small():
    spec = constant_perturbation(1.0, ENV)
    est = simulated_rsr_gap(PARAMS, ENV, spec, 0.1, 4000, seed=2, config=SERIAL)
    assert est.method is EstimateMethod.MONTE_CARLO
    assert est.within(0.0, n_se=4.0)


def test_bootstrap_resamples_the_same_batches_at_every_point():
    """Gaps proportional to eps on shared replicas leave d2 with no bootstrap spread."""
    rng = np.random.default_rng(4)
    base = 1.0 + rng.standard_normal(400)
    eps = [0.1, 0.2, 0.3]
    sets = [e * base for e in eps]
    se = [s.std(ddof=1) / np.sqrt(len(s)) for s in sets]
    cov = bootstrap_covariance(eps, sets, se, resamples=50, max_batches=40, seed=5)
    assert cov[0, 0] > 1e-6
    assert cov[1, 1] == pytest.approx(0.0, abs=1e-12)
    unaligned = bootstrap_covariance(eps, [sets[0], sets[1][:300], sets[2]], se, resamples=50, max_batches=40, seed=5)
    assert unaligned[1, 1] > 1e-6


def test_sweep_points_share_replica_streams():
    spec = PerturbationSpec.table([0.0, 1.0], ENV)
    grid = (0.1, 0.2)
    result = run_sweep(PARAMS, ENV, spec, grid, 600, seed=6, simulation=SERIAL, sweep=QUICK_SWEEP)
    for eps, mean in zip(grid, result.gap_means):
        est = estimate_mean_gap(PARAMS.with_epsilon(eps), ENV, spec, 600, seed=6, keys=SWEEP_KEYS, config=SERIAL)
        assert mean == est.value
    assert result.d2_se == pytest.approx(float(np.sqrt(result.bootstrap_covariance[1, 1])))
