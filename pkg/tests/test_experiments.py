import os
import sys
from dataclasses import replace

import pytest

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config.experiment import EXPERIMENTS, parse_experiment
from logic.bus import bus
from logic.errors import ConfigError
from logic.experiments import (
    REGISTRY,
    ExperimentResult,
    ResultRow,
    exponential_rate,
    list_experiments,
    run_experiment,
    working_epsilon,
)
from logic.state.models import EstimateMethod

TWO_STATE = {"kind": "ctmc", "generator": [[-1.0, 1.0], [1.0, -1.0]]}


def build(experiment, **overrides):
    data = {
        "experiment": experiment,
        "queue": {"lambda": 1.0, "mu": 2.0},
        "environment": TWO_STATE,
        "perturbation": {"values": [0.0, 1.0]},
        "n_replicas": 2000,
        "n_coefficient_replicas": 2000,
        "workers": 1,
        "chunk_size": 500,
        "bootstrap_resamples": 10,
        "seed": 1,
    }
    data.update(overrides)
    return parse_experiment(data)


def rows(result):
    return {row.name: row for row in result.rows}


def test_every_experiment_is_registered():
    assert set(REGISTRY) == set(EXPERIMENTS)
    assert tuple(list_experiments()) == EXPERIMENTS


def test_working_epsilon_prefers_queue_setting():
    assert working_epsilon(build("sweep")) == pytest.approx(0.10)
    assert working_epsilon(build("sweep", queue={"lambda": 1.0, "mu": 2.0, "epsilon": 0.05})) == 0.05


def test_exponential_rate_for_known_kernels():
    assert exponential_rate(build("sweep").environment, build("sweep").perturbation) == pytest.approx(2.0)
    constant = build("sweep", perturbation={"values": [1.0, 1.0]})
    assert exponential_rate(constant.environment, constant.perturbation) is None
    ou = build("sweep", environment={"kind": "ou", "theta": 3.0}, perturbation={"slope": 0.1, "soft_h1": True})
    assert exponential_rate(ou.environment, ou.perturbation) is None


def test_result_rows_emit_events_and_count_replicas():
    seen = []
    bus.on("experiment:row", lambda **kw: seen.append(kw["row"].name))
    try:
        out = ExperimentResult("demo")
        out.add_closed("k", 1.5, "anchor", target=1.5)
        out.add(ResultRow("mc", 0.1, 0.01, EstimateMethod.MONTE_CARLO.value, 500, None, "anchor", n_aborted=2))
    finally:
        bus.clear()
    assert seen == ["k", "mc"]
    assert out.replica_counts() == {"mc": (500, 2)}
    assert out.n_aborted == 2


def test_unknown_experiment_rejected():
    config = replace(build("sweep"), experiment="nope")
    with pytest.raises(ConfigError):
        run_experiment(config)


def test_moments_check_rows():
    out = rows(run_experiment(build("moments_check")))
    for name in ("E_B", "E_B2", "E_N", "E_NB", "E_D", "laplace_B_at_1", "decomposition_E_H"):
        assert out[name].value == pytest.approx(out[name].target, abs=6 * out[name].std_error), name
    assert out["interleave_probability_5"].value == pytest.approx(0.2)
    assert out["laplace_derivative_at_0"].value == pytest.approx(-1.0, abs=1e-4)


def test_exponential_decay_rows_and_table():
    config = build("exponential_decay", alphas=[0.5, 2.0, 8.0], n_coefficient_replicas=4000)
    result = run_experiment(config)
    out = rows(result)
    assert out["delta2_exponential_alpha_0"].value == pytest.approx(-0.25)
    assert out["delta2_exponential_alpha_2"].value == pytest.approx(-0.044952, abs=1e-6)
    assert out["concave_nondecreasing_nonpositive"].value == 1.0
    mc = out["covariance_integral_alpha_2"]
    assert abs(mc.value - mc.target) <= 4 * mc.std_error
    header, table = result.tables["exponential_decay"]
    assert header == ("alpha", "delta2", "z_laplace")
    assert [r[0] for r in table] == [0.5, 2.0, 8.0]


def test_exponential_decay_rejects_nonpositive_alpha():
    with pytest.raises(ConfigError):
        run_experiment(build("exponential_decay", alphas=[0.0, 1.0]))


def test_busy_bound_rows():
    config = build("busy_bound", queue={"lambda": 1.0, "mu": 2.0, "epsilon": 0.1},
                   perturbation={"values": [0.0, -1.0]}, initial_customers=[1, 3])
    out = rows(run_experiment(config))
    k = out["bound_K"].value
    assert k == pytest.approx(1.0 / 0.9)
    for n in (1, 3):
        row = out[f"busy_per_customer_{n}"]
        assert row.target == pytest.approx(k)
        assert row.value <= k + 4 * row.std_error


def test_point_process_laws_rows():
    config = build("point_process_laws", perturbation={"values": [-1.0, 1.0]},
                   queue={"lambda": 1.0, "mu": 2.0, "epsilon": 0.5}, points=[0.5], horizon=20.0,
                   n_coefficient_replicas=500)
    out = rows(run_experiment(config))
    assert out["added_intensity"].target == pytest.approx(0.25)
    assert out["canceled_intensity"].target == pytest.approx(0.25)
    survival = out["first_added_survival_0.5"]
    reference = out["first_added_environment_0.5"]
    assert abs(survival.value - reference.value) <= 4 * (survival.std_error + reference.std_error)


def test_sweep_rows_for_constant_perturbation():
    config = build("sweep", perturbation={"values": [1.0, 1.0]}, eps_grid=[0.05, 0.1, 0.15, 0.2],
                   n_replicas=4000)
    result = run_experiment(config)
    out = rows(result)
    assert out["d1_hat"].target == pytest.approx(1.0)
    assert out["d2_hat"].target == pytest.approx(-1.0)
    assert out["d1_hat"].method == EstimateMethod.FIT.value
    assert {"gap_eps_0.05", "gap_eps_0.2"} <= set(out)
    assert {"d1_hat_independent_points_se", "d2_hat_independent_points_se"} <= set(out)
    assert "sweep" in result.tables
