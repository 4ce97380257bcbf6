# config/experiment.py
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from config.config import DEFAULT_EPS_GRID, SimulationConfig, SweepConfig
from logic.environment import AffineClipFunction, EnvironmentModel, FiniteCtmcEnvironment, OuEnvironment
from logic.errors import BusyPerturbError, ConfigError
from logic.perturbation import PerturbationSpec, validate
from logic.state.models import QueueParams

logger = logging.getLogger(__name__)

EXPERIMENTS: Tuple[str, ...] = (
    "moments_check",
    "first_order",
    "second_order",
    "rsr_gap",
    "fast_env",
    "sweep",
    "point_process_laws",
    "busy_bound",
    "exponential_decay",
)

_TOP_LEVEL = {
    "experiment", "queue", "environment", "perturbation", "eps_grid", "n_replicas",
    "n_coefficient_replicas", "alphas", "points", "initial_customers", "horizon", "seed",
    "workers", "chunk_size", "max_events", "bootstrap_resamples", "output", "event_log",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment file, parsed and validated"""
    experiment: str
    queue: QueueParams
    environment: EnvironmentModel
    perturbation: PerturbationSpec
    eps_grid: Tuple[float, ...] = DEFAULT_EPS_GRID
    n_replicas: int = 1_000_000
    n_coefficient_replicas: int = 100_000
    alphas: Tuple[float, ...] = (1.0, 4.0, 16.0, 64.0)
    points: Tuple[float, ...] = (0.5, 1.0, 2.0)
    initial_customers: Tuple[int, ...] = (1, 2, 3, 4, 5)
    horizon: float = 200.0
    seed: int = 0
    output: Optional[Path] = None
    event_log: bool = False
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    raw: Dict[str, Any] = field(default_factory=dict, compare=False)


def _require(section: Dict[str, Any], key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing '{key}' in {where}")
    return section[key]


def _count(value, name: str) -> int:
    """Integers may be written with exponent notation (1e6)"""
    try:
        as_float = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if as_float != int(as_float) or as_float <= 0:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(as_float)


def _floats(values, name: str) -> Tuple[float, ...]:
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigError(f"{name} must be a non-empty list")
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must contain numbers")


def _environment(section: Dict[str, Any]) -> EnvironmentModel:
    kind = _require(section, "kind", "environment")
    scale = float(section.get("time_scale", 1.0))
    if kind == "ctmc":
        return FiniteCtmcEnvironment(_require(section, "generator", "environment"), alpha=scale)
    if kind == "ou":
        return OuEnvironment(
            theta=float(_require(section, "theta", "environment")),
            mean=float(section.get("mean", 0.0)),
            stationary_variance=float(section.get("variance", 1.0)),
            alpha=scale,
        )
    raise ConfigError(f"unknown environment kind {kind!r} (expected 'ctmc' or 'ou')")


def _perturbation(section: Dict[str, Any], env: EnvironmentModel) -> PerturbationSpec:
    bound = section.get("bound")
    bound = None if bound is None else float(bound)
    if "values" in section:
        if not isinstance(env, FiniteCtmcEnvironment):
            raise ConfigError("per-state perturbation values need a ctmc environment")
        values = _floats(section["values"], "perturbation.values")
        if len(values) != env.n_states:
            raise ConfigError(f"perturbation has {len(values)} values for {env.n_states} states")
        return PerturbationSpec.table(values, env, bound)
    if "slope" in section or "intercept" in section:
        clip = section.get("clip")
        p = AffineClipFunction(
            slope=float(section.get("slope", 0.0)),
            intercept=float(section.get("intercept", 0.0)),
            clip=None if clip is None else float(clip),
        )
        return PerturbationSpec.build(p, env, bound, soft_h1=bool(section.get("soft_h1", False)))
    raise ConfigError("perturbation needs 'values' or an affine descriptor")


def parse_experiment(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("experiment file must hold an object")
    unknown = set(data) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    experiment = _require(data, "experiment", "experiment file")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")

    queue_section = _require(data, "queue", "experiment file")
    try:
        queue = QueueParams(
            lam=float(_require(queue_section, "lambda", "queue")),
            mu=float(_require(queue_section, "mu", "queue")),
            epsilon=float(queue_section.get("epsilon", 0.0)),
        )
        env = _environment(_require(data, "environment", "experiment file"))
        spec = _perturbation(_require(data, "perturbation", "experiment file"), env)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"malformed section: {e}")

    eps_grid = _floats(data["eps_grid"], "eps_grid") if "eps_grid" in data else DEFAULT_EPS_GRID
    validate(spec, queue, env)
    for eps in eps_grid:
        validate(spec, queue.with_epsilon(eps))

    workers = data.get("workers")
    simulation = SimulationConfig(
        max_events=_count(data.get("max_events", SimulationConfig.max_events), "max_events"),
        chunk_size=_count(data.get("chunk_size", SimulationConfig.chunk_size), "chunk_size"),
        workers=None if workers is None else _count(workers, "workers"),
    )
    sweep = SweepConfig(
        eps_grid=eps_grid,
        bootstrap_resamples=int(data.get("bootstrap_resamples", SweepConfig.bootstrap_resamples)),
    )
    output = data.get("output")
    return ExperimentConfig(
        experiment=experiment,
        queue=queue,
        environment=env,
        perturbation=spec,
        eps_grid=eps_grid,
        n_replicas=_count(data.get("n_replicas", 1_000_000), "n_replicas"),
        n_coefficient_replicas=_count(data.get("n_coefficient_replicas", 100_000), "n_coefficient_replicas"),
        alphas=_floats(data["alphas"], "alphas") if "alphas" in data else ExperimentConfig.alphas,
        points=_floats(data["points"], "points") if "points" in data else ExperimentConfig.points,
        initial_customers=tuple(_count(n, "initial_customers") for n in data.get("initial_customers", (1, 2, 3, 4, 5))),
        horizon=float(data.get("horizon", ExperimentConfig.horizon)),
        seed=int(data.get("seed", 0)),
        output=None if output is None else Path(output),
        event_log=bool(data.get("event_log", False)),
        simulation=simulation,
        sweep=sweep,
        raw=data,
    )


def load_experiment(path: Path) -> ExperimentConfig:
    """Read and validate an experiment file; raises ConfigError or ValidationError"""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    try:
        config = parse_experiment(data)
    except BusyPerturbError:
        raise
    except ValueError as e:
        # dataclass checks in config/config.py raise bare ValueError
        raise ConfigError(str(e))
    logger.info(f"Loaded {config.experiment} experiment from {path}")
    return config
