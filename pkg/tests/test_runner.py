import os
import sys
from dataclasses import dataclass, field

import numpy as np
import pytest

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config.config import SimulationConfig
from logic.bus import bus
from logic.errors import AbortBudgetExceeded, ReplicaAborted
from logic.random_stream import ReplicaStreams, replica_seed
from logic.runner import MomentAccumulator, chunk_bounds, run_replicas


@dataclass(frozen=True)
class UniformPairTask:
    width: int = field(default=2, init=False)

    def run_replica(self, streams):
        u = streams.marks.uniform()
        return [u, u * u]


@dataclass(frozen=True)
class SometimesAbortTask:
    """Aborts every replica whose first uniform falls below ``threshold``"""
    threshold: float
    width: int = field(default=1, init=False)

    def run_replica(self, streams):
        u = streams.marks.uniform()
        if u < self.threshold:
            raise ReplicaAborted("event_cap", 1)
        return [u]


def test_accumulator_merge_matches_single_pass():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((300, 3))
    whole = MomentAccumulator(3).add_block(data)
    parts = MomentAccumulator(3).add_block(data[:100]).merge(MomentAccumulator(3).add_block(data[100:]))
    assert parts.n == whole.n == 300
    assert parts.mean == pytest.approx(whole.mean)
    assert whole.covariance == pytest.approx(np.cov(data, rowvar=False))


def test_accumulator_linear_estimate():
    data = np.array([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]])
    acc = MomentAccumulator(2).add_block(data)
    est = acc.estimate([1.0, -1.0], scale=2.0)
    assert est.value == pytest.approx(2.0 * (3.0 - 2.0))
    assert est.std_error == pytest.approx(2.0 * 2.0 / np.sqrt(3))
    assert acc.component(1).std_error == 0.0
    with pytest.raises(ValueError):
        acc.merge(MomentAccumulator(3))


def test_chunk_bounds_cover_all_replicas():
    assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]


def test_replica_seeds_are_independent_of_chunking():
    a = ReplicaStreams.from_seed(5, replica=7, keys=(1,)).marks.uniform()
    b = ReplicaStreams.from_seed_sequence(replica_seed(5, 7, (1,))).marks.uniform()
    c = ReplicaStreams.from_seed(5, replica=7, keys=(2,)).marks.uniform()
    assert a == b
    assert a != c


def test_run_replicas_uniform_moments():
    run = run_replicas(UniformPairTask(), 5000, seed=1, config=SimulationConfig(workers=1, chunk_size=700))
    mean = run.accumulator.component(0)
    assert mean.within(0.5, n_se=4.0)
    assert run.accumulator.component(1).within(1.0 / 3.0, n_se=4.0)
    assert run.samples is None


def test_run_replicas_results_do_not_depend_on_workers():
    serial = run_replicas(UniformPairTask(), 1000, seed=2, config=SimulationConfig(workers=1, chunk_size=128))
    pooled = run_replicas(UniformPairTask(), 1000, seed=2, config=SimulationConfig(workers=3, chunk_size=128))
    assert np.array_equal(serial.accumulator.total, pooled.accumulator.total)
    assert np.array_equal(serial.accumulator.outer, pooled.accumulator.outer)


def test_run_replicas_keeps_samples_in_replica_order():
    run = run_replicas(UniformPairTask(), 300, seed=3, config=SimulationConfig(workers=1, chunk_size=64),
                       keep_samples=True)
    assert run.samples.shape == (300, 2)
    first = ReplicaStreams.from_seed(3, replica=0).marks.uniform()
    assert run.samples[0, 0] == first


def test_aborted_replicas_are_counted_and_reported():
    events = []
    bus.on("replicas:aborted", lambda **kw: events.append(kw))
    try:
        run = run_replicas(SometimesAbortTask(0.2), 1000, seed=4, config=SimulationConfig(workers=1, chunk_size=250))
    finally:
        bus.clear()
    assert run.n_aborted > 0
    assert run.accumulator.n + run.n_aborted == 1000
    assert events and events[0]["reasons"] == {"event_cap": run.n_aborted}
    assert run.accumulator.component(0).n_aborted == run.n_aborted


def test_every_replica_aborted_raises():
    with pytest.raises(AbortBudgetExceeded):
        run_replicas(SometimesAbortTask(1.1), 50, seed=5, config=SimulationConfig(workers=1, chunk_size=25))


def test_run_replicas_rejects_empty_runs():
    with pytest.raises(ValueError):
        run_replicas(UniformPairTask(), 0, seed=0)
