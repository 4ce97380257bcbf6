# config/config.py
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import psutil


DEFAULT_EPS_GRID: Tuple[float, ...] = (0.01, 0.02, 0.04, 0.06, 0.08, 0.10)


def available_workers() -> int:
    """Number of worker processes used when a config leaves it unset"""
    return psutil.cpu_count(logical=True) or 1


@dataclass(frozen=True)
class SimulationConfig:
    """Replica simulation settings"""
    max_events: int = 10_000_000      # per busy period, aborts the replica beyond this
    chunk_size: int = 2048            # replicas per task; fixed so results ignore worker count
    workers: Optional[int] = None     # None -> available_workers()
    abort_fraction_warning: float = 1e-6

    def __post_init__(self):
        if self.max_events <= 0:
            raise ValueError("max_events must be positive")
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if self.workers is not None and self.workers <= 0:
            raise ValueError("workers must be positive")

    @property
    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else available_workers()


@dataclass(frozen=True)
class QuadratureConfig:
    """Numerical tolerances for correlation integrals and transforms"""
    quad_epsabs: float = 1e-10
    quad_limit: int = 200
    uniformization_tol: float = 1e-12
    hermite_order: int = 64
    derivative_step: float = 1e-5     # scaled by (1 + |xi|)


@dataclass(frozen=True)
class SweepConfig:
    """Epsilon sweep defaults"""
    eps_grid: Tuple[float, ...] = DEFAULT_EPS_GRID
    bootstrap_resamples: int = 200
    bootstrap_max_batches: int = 2000
    min_replicas_per_point: int = 10_000


@dataclass(frozen=True)
class AppConfig:
    """Main application configuration"""
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: Path = Path("results")
    output_dir_env: str = "BUSYPERTURB_OUTPUT_DIR"
    csv_schema_version: int = 1
    debug: bool = False
