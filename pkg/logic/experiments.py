"""Experiment registry: each entry turns an ExperimentConfig into result rows.

Rows carry a descriptive anchor naming the relation they check and, when one
exists, the analytic target the estimate is compared against.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from config.experiment import EXPERIMENTS, ExperimentConfig
from .analytic_mm1 import (
    busy_functional_estimates,
    busy_laplace_derivative,
    busy_moments,
    busy_pgf_laplace,
    decomposition_estimates,
    interleave_probability,
    z_laplace,
    z_normalization_gap,
)
from .bus import bus
from .coefficients import (
    a_minus_terms,
    a_plus_terms,
    constant_delta2,
    covariance_integral,
    delta1,
    delta2_covariance,
    delta2_exponential,
    exponential_decay_curve,
    fast_env_limit,
    fast_env_sweep,
    first_order_split,
    is_concave_nondecreasing,
    rsr_gap,
)
from .coupled_sim import estimate_pqueue_mean, first_point_survival, summarize_coupled, thinning_intensity
from .environment import (
    AffineClipFunction,
    EnvironmentModel,
    ExponentialSumKernel,
    FiniteCtmcEnvironment,
    OuEnvironment,
)
from .errors import ConfigError
from .expansion_fit import fit_estimates, rsr_reference, run_sweep, simulated_rsr_gap
from .perturbation import PerturbationSpec, validate
from .state.models import CoefficientEstimate, EstimateMethod, SweepResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResultRow:
    name: str
    value: float
    std_error: float
    method: str
    n_replicas: int
    target: Optional[float]
    anchor: str
    n_aborted: int = 0

    @classmethod
    def from_estimate(cls, name: str, estimate: CoefficientEstimate, anchor: str,
                      target: Optional[float] = None) -> ResultRow:
        return cls(
            name=name,
            value=float(estimate.value),
            std_error=float(estimate.std_error),
            method=estimate.method.value,
            n_replicas=int(estimate.n_replicas),
            target=None if target is None else float(target),
            anchor=anchor,
            n_aborted=int(estimate.n_aborted),
        )

    @classmethod
    def closed(cls, name: str, value: float, anchor: str, target: Optional[float] = None) -> ResultRow:
        return cls.from_estimate(name, CoefficientEstimate.closed(value), anchor, target)


@dataclass
class ExperimentResult:
    experiment: str
    rows: List[ResultRow] = field(default_factory=list)
    tables: Dict[str, Tuple[Tuple[str, ...], List[tuple]]] = field(default_factory=dict)

    def add(self, row: ResultRow) -> None:
        self.rows.append(row)
        bus.emit("experiment:row", experiment=self.experiment, row=row)

    def add_estimate(self, name: str, estimate: CoefficientEstimate, anchor: str,
                     target: Optional[float] = None) -> None:
        self.add(ResultRow.from_estimate(name, estimate, anchor, target))

    def add_closed(self, name: str, value: float, anchor: str, target: Optional[float] = None) -> None:
        self.add(ResultRow.closed(name, value, anchor, target))

    def replica_counts(self) -> Dict[str, Tuple[int, int]]:
        """(replicas, aborted) per simulated row; fitted rows reuse sweep replicas"""
        return {r.name: (r.n_replicas, r.n_aborted) for r in self.rows
                if r.n_replicas and r.method != EstimateMethod.FIT.value}

    @property
    def n_aborted(self) -> int:
        return max((r.n_aborted for r in self.rows), default=0)


Experiment = Callable[[ExperimentConfig], ExperimentResult]
REGISTRY: Dict[str, Experiment] = {}


def experiment(name: str):
    def register(fn: Experiment) -> Experiment:
        if name not in EXPERIMENTS:
            raise ValueError(f"{name} is not a known experiment")
        REGISTRY[name] = fn
        return fn
    return register


def working_epsilon(config: ExperimentConfig) -> float:
    """queue.epsilon when set, else the largest grid value"""
    return config.queue.epsilon if config.queue.epsilon > 0 else max(config.eps_grid)


def exponential_rate(env: EnvironmentModel, spec: PerturbationSpec) -> Optional[float]:
    """Decay rate when C_p is a single exponential, None otherwise"""
    if spec.is_constant:
        return None
    if isinstance(env, FiniteCtmcEnvironment) and env.n_states == 2:
        return env.spectral_gap()
    if isinstance(env, OuEnvironment) and isinstance(spec.p, AffineClipFunction) and spec.p.clip is None:
        return env.spectral_gap()
    return None


def _sweep_table(result: SweepResult) -> Tuple[Tuple[str, ...], List[tuple]]:
    header = ("eps", "mean_gap", "std_error", "fitted")
    rows = [(e, m, s, result.fitted(e))
            for e, m, s in zip(result.eps_grid, result.gap_means, result.gap_stderrs)]
    return header, rows


def _add_sweep(out: ExperimentResult, config: ExperimentConfig, d1_target: Optional[float],
               d2_target: Optional[float]) -> SweepResult:
    result = run_sweep(config.queue, config.environment, config.perturbation, config.eps_grid,
                       config.n_replicas, config.seed, config.simulation, config.sweep)
    d1_hat, d2_hat = fit_estimates(result)
    out.add_estimate("d1_hat", d1_hat, "first_order_expansion", d1_target)
    out.add_estimate("d2_hat", d2_hat, "second_order_expansion", d2_target)
    out.add_closed("fit_chi2", result.chi2, "sweep_fit_quality")
    out.add_closed("max_residual_over_eps3", result.max_scaled_residual, "sweep_fit_quality")
    if result.bootstrap_covariance is not None:
        out.add_closed("d1_hat_independent_points_se", float(result.covariance[0, 0]) ** 0.5, "sweep_fit_quality")
        out.add_closed("d2_hat_independent_points_se", float(result.covariance[1, 1]) ** 0.5, "sweep_fit_quality")
    out.tables["sweep"] = _sweep_table(result)
    return result


def _second_order(out: ExperimentResult, config: ExperimentConfig) -> CoefficientEstimate:
    params, env, spec = config.queue, config.environment, config.perturbation
    n, seed = config.n_coefficient_replicas, config.seed
    plus = a_plus_terms(params, env, spec, n, seed, (20,), config.simulation)
    minus = a_minus_terms(params, env, spec, n, seed, (21,), config.simulation)
    for key in ("added_pair", "added_then_canceled"):
        out.add_estimate(f"a_plus_{key}", plus[key], "added_departure_classes")
    out.add_estimate("a_plus", plus["total"], "added_departure_classes")
    for key in ("canceled_then_added", "canceled_pair"):
        out.add_estimate(f"a_minus_{key}", minus[key], "canceled_departure_classes")
    out.add_estimate("a_minus", minus["total"], "canceled_departure_classes")

    rate = exponential_rate(env, spec)
    target = None
    if rate is not None and spec.sign_pattern == "nonneg":
        target = constant_delta2(params, spec.mean_p) + delta2_exponential(rate, spec.var_p, params).value
    elif spec.is_constant:
        target = constant_delta2(params, spec.mean_p)
    d2 = plus["total"].minus(minus["total"])
    out.add_estimate("delta2", d2, "second_order_expansion", target)
    if spec.sign_pattern == "nonneg" and not spec.is_zero:
        cov = delta2_covariance(params, env, spec, n, seed, (22,), config.simulation)
        out.add_estimate("delta2_covariance_form", cov, "covariance_representation", target)
    return d2


# -- registry -------------------------------------------------------------------------

@experiment("moments_check")
def moments_check(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("moments_check")
    params = config.queue.with_epsilon(0.0)
    targets = busy_moments(params).as_dict()
    estimates = busy_functional_estimates(params, config.n_replicas, config.seed, config.simulation,
                                          laplace_points=(1.0,))
    for name, target in targets.items():
        out.add_estimate(name, estimates[name], "busy_period_moments", target)
    out.add_estimate("laplace_B_at_1", estimates["laplace_1"], "busy_period_transform",
                     float(busy_pgf_laplace(1.0, 1.0, params)))

    dec = decomposition_estimates(params, config.n_replicas, config.seed, config.simulation)
    out.add_estimate("decomposition_E_H", dec["E_H"], "sub_busy_decomposition", params.lam / params.mu)
    out.add_estimate("decomposition_E_B", dec["E_B"], "sub_busy_decomposition", targets["E_B"])
    out.add_estimate("decomposition_E_B2", dec["E_B2"], "sub_busy_decomposition", targets["E_B2"])

    out.add_closed("laplace_derivative_at_0", busy_laplace_derivative(0.0, params, 1e-5),
                   "busy_period_transform", -targets["E_B"])
    out.add_closed("interleave_probability_5", interleave_probability(5), "catalan_interleaving", 0.2)
    out.add_closed("z_normalization_gap", z_normalization_gap(params), "tail_variable_normalization")
    return out


@experiment("first_order")
def first_order(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("first_order")
    params, spec = config.queue, config.perturbation
    d1 = delta1(params, spec)
    out.add_estimate("delta1", d1, "first_order_expansion")
    for name, estimate in first_order_split(params, spec).items():
        out.add_estimate(name, estimate, "single_extra_departure")

    eps = working_epsilon(config)
    summary = summarize_coupled(params.with_epsilon(eps), config.environment, spec,
                                config.n_coefficient_replicas, config.seed, keys=(5,), config=config.simulation)
    out.add_estimate(f"p_added_before_b_eps_{eps:g}", summary.p_added_before_b, "single_extra_departure")
    out.add_estimate(f"p_canceled_before_b_eps_{eps:g}", summary.p_canceled_before_b, "single_extra_departure")
    for event_class, freq in summary.class_frequency.items():
        out.add_estimate(f"class_{event_class.value}_frequency", freq, "event_classes")

    _add_sweep(out, config, d1.value, None)
    return out


@experiment("second_order")
def second_order(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("second_order")
    out.add_estimate("delta1", delta1(config.queue, config.perturbation), "first_order_expansion")
    d2 = _second_order(out, config)
    _add_sweep(out, config, delta1(config.queue, config.perturbation).value, d2.value)
    return out


@experiment("rsr_gap")
def rsr_gap_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("rsr_gap")
    params, env, spec = config.queue, config.environment, config.perturbation
    rate = exponential_rate(env, spec)
    target = None if rate is None else delta2_exponential(rate, spec.var_p, params).value

    if spec.sign_pattern in ("nonneg", "nonpos"):
        semi = rsr_gap(params, env, spec, spec.sign_pattern, config.n_coefficient_replicas, config.seed,
                       (23,), config.simulation)
        out.add_estimate(f"rsr_gap_{spec.sign_pattern}", semi, "reduced_rate_comparison", target)
    else:
        logger.info("mixed-sign perturbation: no single-sign gap formula, simulated gap only")

    eps = working_epsilon(config)
    out.add_closed(f"rsr_mean_busy_eps_{eps:g}", rsr_reference(params, spec, eps), "reduced_rate_queue")
    simulated = simulated_rsr_gap(params, env, spec, eps, config.n_replicas, config.seed,
                                  config=config.simulation)
    out.add_estimate(f"rsr_gap_simulated_eps_{eps:g}", simulated, "reduced_rate_comparison", target)
    return out


@experiment("fast_env")
def fast_env(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("fast_env")
    params, env, spec = config.queue, config.environment, config.perturbation
    limit = fast_env_limit(params, spec)
    rate = exponential_rate(env, spec)
    sweep = fast_env_sweep(params, env, spec, config.alphas, config.n_coefficient_replicas, config.seed,
                           config.simulation)
    for alpha, estimate in sweep:
        target = None
        if rate is not None and spec.sign_pattern == "nonneg":
            target = limit.value + delta2_exponential(rate * alpha, spec.var_p, params).value
        out.add_estimate(f"delta2_alpha_{alpha:g}", estimate, "fast_environment", target)
    out.add_estimate("delta2_limit", limit, "fast_environment")
    out.tables["fast_env"] = (("alpha", "delta2", "std_error", "limit"),
                              [(a, e.value, e.std_error, limit.value) for a, e in sweep])
    return out


@experiment("sweep")
def sweep(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("sweep")
    d1 = delta1(config.queue, config.perturbation).value
    d2 = constant_delta2(config.queue, config.perturbation.mean_p) if config.perturbation.is_constant else None
    result = _add_sweep(out, config, d1, d2)
    for eps, mean, se in zip(result.eps_grid, result.gap_means, result.gap_stderrs):
        out.add(ResultRow(f"gap_eps_{eps:g}", mean, se, EstimateMethod.MONTE_CARLO.value,
                          result.n_replicas_per_point, result.fitted(eps), "coupled_gap"))
    return out


@experiment("point_process_laws")
def point_process_laws(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("point_process_laws")
    params, env, spec = config.queue, config.environment, config.perturbation
    at = params.with_epsilon(working_epsilon(config))
    validate(spec, at)
    survival = first_point_survival(at, env, spec, config.points, config.n_replicas, config.seed,
                                    config.simulation)
    for i, x in enumerate(config.points):
        added_ref = survival["added_environment"][i]
        canceled_ref = survival["canceled_environment"][i]
        out.add_estimate(f"first_added_survival_{x:g}", survival["added_simulated"][i],
                         "added_point_survival", added_ref.value)
        out.add_estimate(f"first_added_environment_{x:g}", added_ref, "added_point_survival")
        out.add_estimate(f"first_canceled_survival_{x:g}", survival["canceled_simulated"][i],
                         "canceled_point_survival", canceled_ref.value)
        out.add_estimate(f"first_canceled_environment_{x:g}", canceled_ref, "canceled_point_survival")

    added, canceled = thinning_intensity(at, env, spec, config.horizon, config.n_coefficient_replicas,
                                         config.seed, config.simulation)
    out.add_estimate("added_intensity", added, "doubly_stochastic_thinning", at.epsilon * spec.mean_p_plus)
    out.add_estimate("canceled_intensity", canceled, "doubly_stochastic_thinning", at.epsilon * spec.mean_p_minus)
    return out


@experiment("busy_bound")
def busy_bound(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("busy_bound")
    params, env, spec = config.queue, config.environment, config.perturbation
    at = params.with_epsilon(working_epsilon(config))
    report = validate(spec, at)
    out.add_closed("bound_K", report.K, "busy_period_bound")
    for n in config.initial_customers:
        mean = estimate_pqueue_mean(at, env, spec, config.n_replicas, config.seed, initial_customers=n,
                                    keys=(60, n), config=config.simulation)
        per_customer = CoefficientEstimate(mean.value / n, mean.std_error / n, mean.n_replicas,
                                           mean.method, mean.n_aborted)
        out.add_estimate(f"busy_per_customer_{n}", per_customer, "busy_period_bound", report.K)
    return out


@experiment("exponential_decay")
def exponential_decay(config: ExperimentConfig) -> ExperimentResult:
    out = ExperimentResult("exponential_decay")
    params, spec = config.queue.with_epsilon(0.0), config.perturbation
    var_p = spec.var_p if spec.var_p > 0 else 0.25
    alphas = sorted(config.alphas)
    if alphas[0] <= 0:
        raise ConfigError("exponential_decay needs positive alphas")

    curve = exponential_decay_curve(params, var_p, alphas)
    out.add_closed("delta2_exponential_alpha_0", delta2_exponential(0.0, var_p, params).value,
                   "exponential_covariance_gap", -var_p / params.gap ** 3)
    for j, (alpha, value) in enumerate(curve):
        out.add_closed(f"delta2_exponential_alpha_{alpha:g}", value, "exponential_covariance_gap")
        out.add_closed(f"z_laplace_alpha_{alpha:g}", z_laplace(alpha, params), "tail_variable_transform")
        kernel = ExponentialSumKernel.exponential(var_p, alpha)
        mc = covariance_integral(params, kernel, config.n_coefficient_replicas, config.seed,
                                 keys=(70, j), config=config.simulation)
        out.add_estimate(f"covariance_integral_alpha_{alpha:g}", mc, "exponential_covariance_gap", value)

    values = [v for _, v in curve]
    shape_ok = all(v <= 0 for v in values) and is_concave_nondecreasing(alphas, values)
    out.add_closed("concave_nondecreasing_nonpositive", float(shape_ok), "exponential_covariance_shape", 1.0)
    out.tables["exponential_decay"] = (("alpha", "delta2", "z_laplace"),
                                       [(a, v, z_laplace(a, params)) for a, v in curve])
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    try:
        fn = REGISTRY[config.experiment]
    except KeyError:
        raise ConfigError(f"unknown experiment {config.experiment!r}")
    logger.info(f"Running {config.experiment} (lambda={config.queue.lam:g}, mu={config.queue.mu:g}, "
                f"seed={config.seed})")
    return fn(config)


def list_experiments() -> Sequence[str]:
    return tuple(name for name in EXPERIMENTS if name in REGISTRY)
