import os
import sys

import numpy as np
import pytest
from scipy import integrate

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config.config import SimulationConfig
from logic.analytic_mm1 import (
    busy_count_density,
    busy_count_pmf,
    busy_density,
    busy_functional_estimates,
    busy_laplace_derivative,
    busy_moments,
    busy_pgf_laplace,
    busy_survival,
    catalan,
    decomposition_estimates,
    equilibrium_laplace,
    interleave_probability,
    sample_busy_decomposition,
    sample_busy_period,
    z_density,
    z_laplace,
    z_normalization_gap,
)
from logic.errors import DomainError
from logic.random_stream import ReplicaStreams
from logic.state.models import QueueParams

PARAMS = QueueParams(lam=1.0, mu=2.0)
SERIAL = SimulationConfig(workers=1, chunk_size=512)


def test_busy_moments_reference_values():
    """lambda=1, mu=2 gives the textbook busy-period moments."""
    m = busy_moments(PARAMS)
    assert m.as_dict() == pytest.approx(
        {"E_B": 1.0, "E_B2": 4.0, "E_N": 2.0, "E_NB": 6.0, "E_NN1": 8.0, "E_D": 4.0}
    )


def test_transform_at_origin_and_derivative():
    """phi(1, 0) = 1 and its xi-derivative at 0 is -E(B)."""
    assert busy_pgf_laplace(1.0, 0.0, PARAMS) == pytest.approx(1.0)
    assert busy_laplace_derivative(0.0, PARAMS) == pytest.approx(-1.0, abs=1e-6)


def test_transform_z_derivative_gives_mean_count():
    """d/dz phi(z, 0) at z=1 is E(N)."""
    h = 1e-6
    slope = (busy_pgf_laplace(1.0, 0.0, PARAMS) - busy_pgf_laplace(1.0 - h, 0.0, PARAMS)) / h
    assert slope == pytest.approx(2.0, rel=1e-3)


def test_transform_rejects_outside_domain():
    with pytest.raises(DomainError):
        busy_pgf_laplace(1.5, 0.0, PARAMS)
    with pytest.raises(DomainError):
        busy_pgf_laplace(0.5, -1.0, PARAMS)


def test_transform_accepts_arrays():
    values = busy_pgf_laplace(np.array([0.0, 0.5, 1.0]), 1.0, PARAMS)
    assert values.shape == (3,)
    assert np.all(np.diff(values) > 0)


def test_interleave_probability_is_one_over_n():
    assert [catalan(n) for n in range(6)] == [1, 1, 2, 5, 14, 42]
    for n in range(1, 12):
        assert interleave_probability(n) == pytest.approx(1.0 / n)
    with pytest.raises(DomainError):
        interleave_probability(0)


def test_count_pmf_sums_to_one_with_mean_two():
    n = np.arange(1, 600)
    pmf = np.array([busy_count_pmf(int(k), PARAMS) for k in n])
    assert pmf.sum() == pytest.approx(1.0, abs=1e-8)
    assert (n * pmf).sum() == pytest.approx(2.0, abs=1e-6)


def test_count_density_integrates_to_pmf():
    """int_0^inf b_n(t) dt = P(N = n)."""
    for n in (1, 3, 6):
        total, _ = integrate.quad(lambda t: busy_count_density(n, t, PARAMS), 0.0, 80.0)
        assert total == pytest.approx(busy_count_pmf(n, PARAMS), rel=1e-7)


def test_busy_density_is_a_density_with_mean_one():
    mass, _ = integrate.quad(lambda t: busy_density(t, PARAMS), 0.0, np.inf)
    mean, _ = integrate.quad(lambda t: t * busy_density(t, PARAMS), 0.0, np.inf)
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert mean == pytest.approx(1.0, abs=1e-7)
    assert busy_density(0.0, PARAMS) == pytest.approx(PARAMS.mu)


def test_survival_is_monotone():
    values = [busy_survival(u, PARAMS) for u in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert values[0] == 1.0
    assert all(a > b for a, b in zip(values, values[1:]))


def test_tail_variable_transform_and_normalization():
    assert z_laplace(0.0, PARAMS) == 1.0
    values = [z_laplace(a, PARAMS) for a in (0.5, 1.0, 2.0, 4.0)]
    assert all(0.0 < v < 1.0 for v in values)
    assert all(a > b for a, b in zip(values, values[1:]))
    assert z_normalization_gap(PARAMS) == pytest.approx(3.0)


def test_equilibrium_of_exponential_is_itself():
    for alpha in (0.5, 1.0, 3.0):
        assert equilibrium_laplace(alpha, 1.0 / (1.0 + alpha), 1.0) == pytest.approx(1.0 / (1.0 + alpha))


def test_sampled_busy_period_satisfies_bookkeeping():
    for r in range(50):
        bp = sample_busy_period(ReplicaStreams.from_seed(1, r), PARAMS)
        bp.check()
        assert bp.n_services == len(bp.arrivals) + 1


def test_busy_period_from_several_customers():
    bp = sample_busy_period(ReplicaStreams.from_seed(2), PARAMS, initial_customers=3)
    bp.check()
    assert bp.n_services >= 3
    with pytest.raises(DomainError):
        sample_busy_period(ReplicaStreams.from_seed(2), PARAMS, initial_customers=0)


def test_decomposition_geometry():
    for r in range(30):
        dec = sample_busy_decomposition(ReplicaStreams.from_seed(3, r), PARAMS)
        assert len(dec.initial_gaps) == dec.h + 1
        assert np.all(dec.remaining_horizons() > 0)
        assert np.all(dec.sub_starts() < dec.length)


def test_functional_estimates_match_closed_forms():
    estimates = busy_functional_estimates(PARAMS, 20_000, seed=11, config=SERIAL)
    targets = busy_moments(PARAMS).as_dict()
    for name in ("E_B", "E_B2", "E_N", "E_NB", "E_D"):
        assert estimates[name].within(targets[name], n_se=4.0), name
    assert estimates["laplace_1"].within(busy_pgf_laplace(1.0, 1.0, PARAMS), n_se=4.0)


def test_decomposition_estimates_match_closed_forms():
    estimates = decomposition_estimates(PARAMS, 20_000, seed=12, config=SERIAL)
    assert estimates["E_H"].within(0.5, n_se=4.0)
    assert estimates["E_B"].within(1.0, n_se=4.0)


def test_tail_density_integrates_to_its_transform():
    """int e^{-alpha x} z_density(x) dx = E(exp(-alpha Z)); alpha = 0 gives mass one."""
    assert z_density(-1.0, PARAMS) == 0.0
    assert z_density(0.0, PARAMS) == pytest.approx(2.0 * 1.0 / 4.0)
    for alpha in (0.0, 0.5, 2.0):
        mass, _ = integrate.quad(lambda x: np.exp(-alpha * x) * z_density(x, PARAMS), 0.0, np.inf, limit=200)
        assert mass == pytest.approx(z_laplace(alpha, PARAMS), rel=1e-4)
