"""Chunked replica runner.

Replicas are cut into fixed-size chunks that are evaluated serially or in a process
pool and merged back in chunk order, so results depend only on the seed, the replica
count and the chunk size, never on the number of workers.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Protocol, Self

from config.config import SimulationConfig
from .bus import bus
from .errors import AbortBudgetExceeded, ReplicaAborted
from .random_stream import ReplicaStreams, replica_seed
from .state.models import CoefficientEstimate, EstimateMethod

logger = logging.getLogger(__name__)


class ReplicaTask(Protocol):
    """Picklable unit of work returning ``width`` numbers per replica"""
    width: int

    def run_replica(self, streams: ReplicaStreams) -> Sequence[float]: ...


@dataclass
class ChunkResult:
    values: np.ndarray
    n_aborted: int = 0
    abort_reasons: dict = field(default_factory=dict)


@dataclass
class MomentAccumulator:
    """Sums and cross-products of per-replica vectors; merging is associative"""
    width: int
    n: int = 0
    n_aborted: int = 0
    total: np.ndarray = None
    outer: np.ndarray = None

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.width)
        if self.outer is None:
            self.outer = np.zeros((self.width, self.width))

    def add_block(self, values: np.ndarray, n_aborted: int = 0) -> Self:
        values = np.asarray(values, dtype=float).reshape(-1, self.width)
        self.n += len(values)
        self.n_aborted += n_aborted
        self.total += values.sum(axis=0)
        self.outer += values.T @ values
        return self

    def merge(self, other: MomentAccumulator) -> Self:
        if other.width != self.width:
            raise ValueError("cannot merge accumulators of different widths")
        self.n += other.n
        self.n_aborted += other.n_aborted
        self.total += other.total
        self.outer += other.outer
        return self

    @property
    def mean(self) -> np.ndarray:
        return self.total / max(self.n, 1)

    @property
    def covariance(self) -> np.ndarray:
        """Sample covariance of one replica vector"""
        if self.n < 2:
            return np.zeros((self.width, self.width))
        m = self.mean
        cov = (self.outer - self.n * np.outer(m, m)) / (self.n - 1)
        # round-off can leave tiny negative variances for constant components
        diag = np.clip(np.diag(cov), 0.0, None)
        np.fill_diagonal(cov, diag)
        return cov

    def estimate(self, weights: Sequence[float], method: EstimateMethod = EstimateMethod.MONTE_CARLO,
                 scale: float = 1.0) -> CoefficientEstimate:
        """Linear combination ``scale * weights . mean`` with its standard error"""
        w = np.asarray(weights, dtype=float)
        value = scale * float(w @ self.mean)
        var = float(w @ self.covariance @ w) / max(self.n, 1)
        se = abs(scale) * float(np.sqrt(max(var, 0.0)))
        return CoefficientEstimate(value=value, std_error=se, n_replicas=self.n,
                                   method=method, n_aborted=self.n_aborted)

    def component(self, index: int, method: EstimateMethod = EstimateMethod.MONTE_CARLO) -> CoefficientEstimate:
        w = np.zeros(self.width)
        w[index] = 1.0
        return self.estimate(w, method)


@dataclass
class ReplicaRun:
    accumulator: MomentAccumulator
    samples: Optional[np.ndarray]
    wall_time: float

    @property
    def n_aborted(self) -> int:
        return self.accumulator.n_aborted


def _run_chunk(task: ReplicaTask, seed: int, keys: Tuple[int, ...], start: int, stop: int) -> ChunkResult:
    run_chunk = getattr(task, "run_chunk", None)
    seqs = [replica_seed(seed, r, keys) for r in range(start, stop)]
    if run_chunk is not None:
        return run_chunk(seqs)
    rows: List[Sequence[float]] = []
    reasons: dict = {}
    for seq in seqs:
        try:
            rows.append(task.run_replica(ReplicaStreams.from_seed_sequence(seq)))
        except ReplicaAborted as e:
            reasons[e.reason] = reasons.get(e.reason, 0) + 1
    values = np.asarray(rows, dtype=float).reshape(-1, task.width)
    return ChunkResult(values=values, n_aborted=sum(reasons.values()), abort_reasons=reasons)


def chunk_bounds(n_replicas: int, chunk_size: int) -> List[Tuple[int, int]]:
    return [(s, min(s + chunk_size, n_replicas)) for s in range(0, n_replicas, chunk_size)]


def run_replicas(task: ReplicaTask, n_replicas: int, seed: int, keys: Sequence[int] = (),
                 config: Optional[SimulationConfig] = None, label: str = "replicas",
                 keep_samples: bool = False) -> ReplicaRun:
    """Run ``n_replicas`` independent replicas of ``task`` and merge their moments"""
    config = config or SimulationConfig()
    if n_replicas <= 0:
        raise ValueError("n_replicas must be positive")
    keys = tuple(int(k) for k in keys)
    bounds = chunk_bounds(n_replicas, config.chunk_size)
    workers = min(config.resolved_workers, len(bounds))
    started = time.perf_counter()
    acc = MomentAccumulator(task.width)
    kept: List[np.ndarray] = []
    reasons: dict = {}

    def _collect(index: int, result: ChunkResult):
        acc.add_block(result.values, result.n_aborted)
        for k, v in result.abort_reasons.items():
            reasons[k] = reasons.get(k, 0) + v
        if keep_samples:
            kept.append(result.values)
        bus.emit("replicas:chunk_done", label=label, chunk=index, done=bounds[index][1], total=n_replicas)

    if workers <= 1:
        for i, (a, b) in enumerate(bounds):
            _collect(i, _run_chunk(task, seed, keys, a, b))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, task, seed, keys, a, b) for a, b in bounds]
            # merge strictly in chunk order
            for i, fut in enumerate(futures):
                _collect(i, fut.result())

    wall = time.perf_counter() - started
    if acc.n == 0:
        raise AbortBudgetExceeded(f"{label}: every replica aborted ({reasons})")
    if acc.n_aborted:
        fraction = acc.n_aborted / (acc.n + acc.n_aborted)
        bus.emit("replicas:aborted", label=label, n_aborted=acc.n_aborted, fraction=fraction, reasons=reasons)
        if fraction > config.abort_fraction_warning:
            logger.warning(f"{label}: {acc.n_aborted} aborted replicas ({fraction:.2e}) {reasons}")
    logger.debug(f"{label}: {acc.n} replicas in {wall:.2f}s with {workers} worker(s)")
    samples = np.concatenate(kept) if keep_samples else None
    return ReplicaRun(accumulator=acc, samples=samples, wall_time=wall)
