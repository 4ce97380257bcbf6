import json
import math
import os
import sys

import pytest

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config.config import SimulationConfig
from logic.analytic_mm1 import sample_busy_period
from logic.coupled_sim import (
    classify,
    estimate_mean_gap,
    estimate_pqueue_mean,
    first_point_survival,
    sample_point_processes,
    simulate_coupled_busy,
    simulate_pqueue_busy,
    summarize_coupled,
    thinning_intensity,
    write_event_log,
)
from logic.environment import FiniteCtmcEnvironment
from logic.errors import H2ViolationError
from logic.perturbation import PerturbationSpec
from logic.random_stream import ReplicaStreams
from logic.state.models import EventClass, QueueParams

ENV = FiniteCtmcEnvironment.two_state(1.0)
PARAMS = QueueParams(lam=1.0, mu=2.0)
ADDED = PerturbationSpec.table([0.0, 1.0], ENV)
CANCELED = PerturbationSpec.table([0.0, -1.0], ENV)
MIXED = PerturbationSpec.table([-1.0, 1.0], ENV)
SERIAL = SimulationConfig(workers=1, chunk_size=256)
INF = math.inf


def test_zero_epsilon_leaves_queues_identical():
    for r in range(100):
        s = simulate_coupled_busy(ReplicaStreams.from_seed(1, r), PARAMS, ENV, MIXED)
        assert s.b_standard == s.b_perturbed
        assert s.event_class is EventClass.NONE
        assert s.gap == 0.0


def test_added_departures_only_shorten_busy_period():
    at = PARAMS.with_epsilon(0.5)
    for r in range(200):
        s = simulate_coupled_busy(ReplicaStreams.from_seed(2, r), at, ENV, ADDED)
        assert s.b_perturbed <= s.b_standard
        assert s.canceled_before_perturbed == 0


def test_canceled_departures_only_lengthen_busy_period():
    at = PARAMS.with_epsilon(0.5)
    for r in range(200):
        s = simulate_coupled_busy(ReplicaStreams.from_seed(3, r), at, ENV, CANCELED)
        assert s.b_perturbed >= s.b_standard
        assert s.added_before_perturbed == 0


def test_classify_each_class():
    assert classify(2.0, 2.0, [], []) is EventClass.NONE
    assert classify(2.0, 1.0, [1.0], []) is EventClass.A_PLUS
    assert classify(2.0, 3.0, [2.5], [0.5]) is EventClass.A_PM
    assert classify(2.0, 3.0, [], [0.5]) is EventClass.A_MINUS
    assert classify(2.0, 1.5, [0.7, 1.5], [0.5]) is EventClass.OTHER
    # canceling the last standard departure, exactly at B, counts as before B
    assert classify(2.0, 2.6, [], [2.0]) is EventClass.A_MINUS
    assert classify(2.0, 3.0, [2.5], [2.0]) is EventClass.A_PM
    assert classify(2.0, 2.5, [], [2.2]) is EventClass.OTHER


def test_pqueue_with_zero_epsilon_is_the_standard_queue():
    """Same seed, eps = 0: the perturbed queue alone retraces the standard busy period."""
    for n in (1, 3):
        for r in range(20):
            bp = sample_busy_period(ReplicaStreams.from_seed(4, r), PARAMS, initial_customers=n)
            t = simulate_pqueue_busy(ReplicaStreams.from_seed(4, r), PARAMS, ENV, MIXED, initial_customers=n)
            assert t == bp.length


def test_point_processes_are_thinnings():
    log = sample_point_processes(ReplicaStreams.from_seed(5), PARAMS.with_epsilon(0.8), ENV, MIXED, 50.0)
    assert set(log.canceled) <= set(log.services)
    assert all(0 <= t < 50.0 for t in log.arrivals + log.services + log.added)
    assert log.added == sorted(log.added)
    assert log.first_added == (log.added[0] if log.added else INF)


def test_summary_classes_partition_the_gap():
    summary = summarize_coupled(PARAMS.with_epsilon(0.3), ENV, MIXED, 2000, seed=6, config=SERIAL)
    total = sum(f.value for f in summary.class_frequency.values())
    assert total == pytest.approx(1.0)
    assert sum(g.value for g in summary.class_gap.values()) == pytest.approx(summary.gap.value)
    assert summary.mean_standard.value - summary.mean_perturbed.value == pytest.approx(summary.gap.value)


def test_gap_estimates_are_seed_deterministic():
    at = PARAMS.with_epsilon(0.1)
    first = estimate_mean_gap(at, ENV, MIXED, 1500, seed=7, config=SERIAL)
    again = estimate_mean_gap(at, ENV, MIXED, 1500, seed=7, config=SERIAL)
    other = estimate_mean_gap(at, ENV, MIXED, 1500, seed=8, config=SERIAL)
    assert first == again
    assert first.value != other.value


def test_gap_estimates_ignore_worker_count():
    at = PARAMS.with_epsilon(0.1)
    serial = estimate_mean_gap(at, ENV, ADDED, 1024, seed=9, config=SimulationConfig(workers=1, chunk_size=256))
    pooled = estimate_mean_gap(at, ENV, ADDED, 1024, seed=9, config=SimulationConfig(workers=2, chunk_size=256))
    assert serial == pooled


def test_gap_estimate_validates_h2():
    with pytest.raises(H2ViolationError):
        estimate_mean_gap(PARAMS.with_epsilon(3.0), ENV, ADDED, 10, seed=0, config=SERIAL)


def test_pqueue_mean_respects_bound():
    """E(T~_n) / n stays below 1 / (mu - eps sup p- - lambda)."""
    at = PARAMS.with_epsilon(0.1)
    for n in (1, 3):
        est = estimate_pqueue_mean(at, ENV, CANCELED, 4000, seed=10, initial_customers=n, config=SERIAL)
        assert est.value / n <= 1.0 / 0.9 + 4 * est.std_error / n


def test_first_point_survival_matches_environment_expression():
    at = PARAMS.with_epsilon(0.5)
    out = first_point_survival(at, ENV, MIXED, (0.5, 1.0), 4000, seed=11, config=SERIAL)
    for side in ("added", "canceled"):
        for sim, ref in zip(out[f"{side}_simulated"], out[f"{side}_environment"]):
            assert abs(sim.value - ref.value) <= 4 * math.hypot(sim.std_error, ref.std_error)
    assert out["added_simulated"][0].value >= out["added_simulated"][1].value


def test_thinning_intensities():
    at = PARAMS.with_epsilon(0.5)
    added, canceled = thinning_intensity(at, ENV, MIXED, 40.0, 500, seed=12, config=SERIAL)
    assert added.within(0.5 * MIXED.mean_p_plus, n_se=4.0)
    assert canceled.within(0.5 * MIXED.mean_p_minus, n_se=4.0)


def test_event_log_lines(tmp_path):
    path = tmp_path / "events.jsonl"
    written = write_event_log(path, PARAMS.with_epsilon(0.2), ENV, MIXED, 25, seed=13)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert written == 25 and len(lines) == 25
    assert {"replica", "b", "b_perturbed", "class"} <= set(lines[0])
    assert lines[3]["replica"] == 3


def test_canceled_last_departure_is_counted_before_b():
    """p = (0, -1): every effective cancellation is an A- event, P(t1- <= B) ~ eps E[p-] / (mu - lambda)."""
    for eps in (0.025, 0.05):
        summary = summarize_coupled(PARAMS.with_epsilon(eps), ENV, CANCELED, 20_000, seed=14, config=SERIAL)
        p_minus = summary.p_canceled_before_b
        a_minus = summary.class_frequency[EventClass.A_MINUS]
        assert p_minus.value == pytest.approx(a_minus.value)
        assert (p_minus.value / eps) == pytest.approx(0.5, abs=4 * p_minus.std_error / eps + 0.1)
        assert summary.class_frequency[EventClass.OTHER].value == 0.0


def test_other_class_is_second_order():
    for eps in (0.025, 0.05):
        summary = summarize_coupled(PARAMS.with_epsilon(eps), ENV, MIXED, 20_000, seed=15, config=SERIAL)
        other = summary.class_frequency[EventClass.OTHER]
        assert other.value / eps ** 2 <= 3.0 + 4 * other.std_error / eps ** 2
        first_canceled = summary.p_canceled_before_b
        assert (first_canceled.value / eps) == pytest.approx(0.5, abs=4 * first_canceled.std_error / eps + 0.1)
