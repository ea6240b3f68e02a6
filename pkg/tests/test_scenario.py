import numpy as np
import pytest
import yaml

from numtrack import (ScenarioError, default_scenario, epsilon_for_mean_sojourn,
                      load_scenario, make_instance, make_policy, make_process,
                      mean_sojourn_slots, validate_scenario)


def write_scenario(tmp_path, content, name="scenario.yaml"):
    path = tmp_path / name
    path.write_text(content)
    return path


def test_default_scenario_valid():
    scenario = default_scenario()
    assert scenario.topology == "fig1"
    assert len(scenario.hash) == 12


def test_validate_reports_counts(tmp_path):
    path = write_scenario(tmp_path, "topology: fig1\n")
    scenario, diagnostics = validate_scenario(path)
    assert diagnostics["constraint_count_literal"] == 25
    assert diagnostics["constraint_count_per_subband"] == 36
    assert np.isclose(diagnostics["noise_power"], 0.025)


def test_noise_power_snr_rule():
    # reference power 1/(2 subbands * 2 links) = 0.25; 10 dB -> 0.025
    problem = make_instance(default_scenario())
    assert np.isclose(problem.noise_power, 0.025)
    cold = make_instance(default_scenario(snr_db=0.0))
    assert np.isclose(cold.noise_power, 0.25)


def test_epsilon_range_error(tmp_path):
    path = write_scenario(tmp_path, "fsmc:\n  epsilon: 0.7\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert err.value.code == "E_EPS_RANGE"


def test_unknown_key_error(tmp_path):
    path = write_scenario(tmp_path, "banana: 1\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert err.value.code == "E_KEY"


def test_parse_error(tmp_path):
    path = write_scenario(tmp_path, "topology: [unclosed\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert err.value.code == "E_PARSE"


def test_grid_errors():
    with pytest.raises(ScenarioError) as err:
        default_scenario(seeds=[1, 1])
    assert err.value.code == "E_SEEDS"
    with pytest.raises(ScenarioError):
        default_scenario(update_periods=[])
    with pytest.raises(ScenarioError):
        default_scenario(policies=["nonsense"])
    with pytest.raises(ScenarioError):
        default_scenario(margins=[-0.1])
    with pytest.raises(ScenarioError):
        default_scenario(horizon=10)


def test_bad_topology_table(tmp_path):
    bad = {
        "topology": {
            "num_nodes": 3,
            "links": [[1, 2], [2, 3]],
            "routes": [{"source": 1, "stream": 1, "links": [9],
                        "destination": 3}],
        }
    }
    path = write_scenario(tmp_path, yaml.safe_dump(bad))
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert err.value.code == "E_TOPO_PARTITION"


def test_explicit_topology_table(tmp_path):
    table = {
        "topology": {
            "num_nodes": 3,
            "links": [[1, 2], [2, 3]],
            "routes": [
                {"source": 1, "stream": 1, "links": [1, 2], "destination": 3},
                {"source": 2, "stream": 1, "links": [2], "destination": 3},
            ],
        },
        "num_subbands": 2,
    }
    path = write_scenario(tmp_path, yaml.safe_dump(table))
    scenario = load_scenario(path)
    problem = make_instance(scenario)
    assert problem.topology.num_links == 2
    assert problem.power_nodes == (1, 2)


def test_config_hash_field_order_invariant(tmp_path):
    a = write_scenario(tmp_path, "horizon: 5000\nsnr_db: 10.0\n", "a.yaml")
    b = write_scenario(tmp_path, "snr_db: 10.0\nhorizon: 5000\n", "b.yaml")
    assert load_scenario(a).hash == load_scenario(b).hash
    c = write_scenario(tmp_path, "horizon: 6000\nsnr_db: 10.0\n", "c.yaml")
    assert load_scenario(a).hash != load_scenario(c).hash


def test_policy_construction():
    assert make_policy("constant").kind == "constant"
    custom = make_policy({"kind": "constant", "stepsize": 0.01})
    assert custom.stepsize == 0.01
    dia = make_policy("diagonal_hessian")
    assert dia.step_cap == 0.02
    bru = make_policy("brute_force")
    assert bru.refine_evals == 0  # tracking runs skip the local search


def test_margin_instance():
    scenario = default_scenario()
    base = make_instance(scenario)
    backed = make_instance(scenario, margin=0.1)
    assert np.allclose(backed.power_budget_vector,
                       base.power_budget_vector - 0.1)
    with pytest.raises(ScenarioError):
        make_instance(scenario, margin=2.0)


def test_epsilon_for_mean_sojourn_roundtrip():
    scenario = default_scenario()
    eps = epsilon_for_mean_sojourn(20.0, 16)
    process = make_process(scenario, seed=1, epsilon=eps)
    assert np.isclose(mean_sojourn_slots(process), 20.0, rtol=1e-9)
    with pytest.raises(ValueError):
        epsilon_for_mean_sojourn(0.9, 16)


def test_process_seed_determinism():
    scenario = default_scenario()
    a = make_process(scenario, seed=5).step_block(200)
    b = make_process(scenario, seed=5).step_block(200)
    assert np.array_equal(a, b)
