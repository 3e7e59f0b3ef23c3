import numpy as np
import pytest
import yaml

from calibration_io import (
    ConfigError,
    TableFormatError,
    config_from_dict,
    estimate_labeled,
    load_config,
    load_labeled_returns,
    load_model,
    load_params,
    load_pool,
    load_table,
    model_from_dict,
    save_model,
    save_params,
    save_pool,
    save_table,
)
from dp_solver import BeliefGrid, solve
from lmcts_solver import LookupTable, build_lookup, build_path_pool
from market_core import ModelValidationError, RegimeModel, SolverError
from ntz_network import NtzParams


def _model_dict(**overrides):
    data = {
        "assets": ["equity", "bonds"],
        "mu": [[0.010, 0.003], [-0.012, 0.004]],
        "cov": [
            [[0.0016, 0.0001], [0.0001, 0.0004]],
            [[0.0064, -0.0004], [-0.0004, 0.0006]],
        ],
        "trans": [[0.9, 0.1], [0.3, 0.7]],
        "rf": 0.002,
    }
    data.update(overrides)
    return data


# ----------------------------------------------------------------------------
# Modelo
# ----------------------------------------------------------------------------

def test_minimal_model_from_dict():
    model = model_from_dict({"mu": [[0.01]], "cov": [[[0.04]]], "trans": [[1.0]]})
    assert model.n_regimes == 1
    assert model.rf.tolist() == [0.0]


def test_transition_row_error_names_the_row():
    with pytest.raises(ModelValidationError) as excinfo:
        model_from_dict(_model_dict(trans=[[0.9, 0.1], [0.3, 0.6]]))
    assert "trans[1]" in str(excinfo.value)


def test_missing_model_key_is_reported():
    data = _model_dict()
    del data["cov"]
    with pytest.raises(ConfigError) as excinfo:
        model_from_dict(data)
    assert excinfo.value.path == "cov"


@pytest.mark.parametrize("eigen, accepted", [(-1e-3, False), (-1e-13, True)])
def test_covariance_tolerance(eigen, accepted):
    data = {"mu": [[0.01, 0.0]], "cov": [[[0.04, 0.0], [0.0, eigen]]], "trans": [[1.0]]}
    if accepted:
        assert model_from_dict(data).n_risky == 2
    else:
        with pytest.raises(ModelValidationError, match="positive semidefinite"):
            model_from_dict(data)


def test_model_file_round_trip(tmp_path):
    model = model_from_dict(_model_dict())
    path = save_model(tmp_path / "model.yaml", model, comment="estimated from labels")
    assert path.read_text().startswith("# estimated from labels\n")
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.mu, model.mu)
    np.testing.assert_array_equal(loaded.sigma, model.sigma)
    assert loaded.asset_names == ("equity", "bonds")


# ----------------------------------------------------------------------------
# Estimación con etiquetas
# ----------------------------------------------------------------------------

def _returns(n_obs: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.005, 0.03, size=(n_obs, 2))


def test_single_label_gives_absorbing_chain():
    model = estimate_labeled(_returns(50), np.zeros(50, dtype=int))
    np.testing.assert_array_equal(model.trans, [[1.0]])


def test_transitions_are_counted_within_sequences():
    labels = np.array([0] * 20 + [1] * 20)
    sequence = np.array([0] * 20 + [1] * 20)
    separate = estimate_labeled(_returns(40), labels, sequence=sequence)
    np.testing.assert_array_equal(separate.trans, np.eye(2))

    joined = estimate_labeled(_returns(40), labels)
    np.testing.assert_allclose(joined.trans, [[19 / 20, 1 / 20], [0.0, 1.0]])


def test_estimate_recovers_sample_moments():
    returns = _returns(60, seed=3)
    labels = np.array([0, 1] * 30)
    model = estimate_labeled(returns, labels, rf=0.001, asset_names=("a", "b"))
    np.testing.assert_allclose(model.mu[1], returns[labels == 1].mean(axis=0))
    np.testing.assert_allclose(model.sigma[0], np.cov(returns[labels == 0], rowvar=False))
    np.testing.assert_allclose(model.trans, [[0.0, 1.0], [1.0, 0.0]])


def test_too_few_observations_names_the_regime():
    labels = np.array([0] * 20 + [1] * 3)
    with pytest.raises(ModelValidationError) as excinfo:
        estimate_labeled(_returns(23), labels)
    assert excinfo.value.field == "regime 1"


def test_load_labeled_returns(tmp_path):
    path = tmp_path / "returns.csv"
    path.write_text("equity,bonds,regime,seq\n0.01,0.002,0,1\n-0.02,0.004,1,1\n0.005,0.001,0,2\n")
    returns, labels, sequence, assets = load_labeled_returns(path, "regime", "seq")
    assert assets == ["equity", "bonds"]
    assert labels.tolist() == [0, 1, 0]
    assert sequence.tolist() == [1, 1, 2]
    assert returns[1, 0] == -0.02

    with pytest.raises(ConfigError):
        load_labeled_returns(path, "state")


# ----------------------------------------------------------------------------
# Configuración
# ----------------------------------------------------------------------------

def test_config_defaults():
    config = config_from_dict(_model_dict())
    assert config.horizon == 50
    assert config.initial_wealth == 1000.0
    assert config.cost_rate == 0.005
    assert config.adjusted_penalty is None
    assert config.evaluation.paths == 100000
    assert config.smoothing.window == 11
    assert config.utility.kind == "crra"
    np.testing.assert_allclose(config.initial_belief, [0.75, 0.25], atol=1e-3)


def test_config_sections_are_parsed():
    config = config_from_dict(_model_dict(
        seed=9,
        goal=1580.0,
        dp={"belief_step": 0.1, "mc_paths": 500, "action_step": 0.1, "penalty": 2.5},
        lmcts={"belief_step": 0.1, "iterations": 30, "bandwidth": 0.2, "sg_window": 7, "smooth": False},
        nn={"hidden": 8},
        constraints={"shorting": True, "bound": 0.5},
        initial_belief=[1.0, 0.0],
    ))
    assert config.dp.mc_paths == 500
    assert config.dp.search.action_step == 0.1
    assert config.adjusted_penalty == 2.5
    assert config.lmcts.kernel.bandwidth == 0.2
    assert config.smoothing.window == 7
    assert not config.smoothing.enabled
    assert config.nn.hidden == 8
    assert config.nn.seed == 9
    assert config.constraints.allow_short and config.constraints.short_limit == 0.5
    assert config.initial_belief == (1.0, 0.0)
    assert config.goal_utility().goal == 1580.0
    assert config.with_seed(4).lmcts.seed == 4


@pytest.mark.parametrize(
    "overrides, path",
    [
        ({"colour": "blue"}, "colour"),
        ({"dp": {"bogus": 1}}, "dp.bogus"),
        ({"nn": {"epoch": 3}}, "nn.epoch"),
        ({"constraints": {"shorts": True}}, "constraints.shorts"),
        ({"dp": {"penalty": "lots"}}, "dp.penalty"),
        ({"horizon": 0}, "horizon"),
        ({"initial_belief": [0.5, 0.3]}, "initial_belief"),
        ({"lmcts": {"belief_step": 0.1}}, "lmcts.belief_step"),
    ],
)
def test_invalid_config_names_the_field(overrides, path):
    with pytest.raises(ConfigError) as excinfo:
        config_from_dict(_model_dict(**overrides))
    assert excinfo.value.path == path


def test_goal_utility_needs_a_goal():
    with pytest.raises(ConfigError):
        config_from_dict(_model_dict()).goal_utility()


def test_config_with_model_file(tmp_path):
    save_model(tmp_path / "model.yaml", model_from_dict(_model_dict()))
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({"model_file": "model.yaml", "horizon": 12}))
    config = load_config(tmp_path / "run.yaml")
    assert config.horizon == 12
    assert config.model.asset_names == ("equity", "bonds")

    (tmp_path / "both.yaml").write_text(yaml.safe_dump({"model_file": "model.yaml", "mu": [[0.0]]}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "both.yaml")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


# ----------------------------------------------------------------------------
# Tablas, parámetros y pools
# ----------------------------------------------------------------------------

def test_dp_table_round_trip_is_exact(tmp_path, two_regime_model, crra, no_short, fast_dp):
    table = solve(two_regime_model, 2, no_short, crra, fast_dp)
    path = save_table(tmp_path / "tables" / "dp.csv", table, two_regime_model.asset_names, seed=11)
    loaded, assets = load_table(path)
    assert assets == ["equity", "bonds"]
    np.testing.assert_array_equal(loaded.alloc, table.alloc)
    np.testing.assert_array_equal(loaded.value, table.value)
    assert loaded.penalty == table.penalty
    assert loaded.grid.step == table.grid.step


def test_lmcts_table_round_trip_is_exact(tmp_path, two_regime_model, crra, no_short, fast_lmcts):
    lookup = build_lookup(two_regime_model, 2, no_short, crra, fast_lmcts)
    path = save_table(tmp_path / "lmcts.csv", lookup, two_regime_model.asset_names)
    loaded, _ = load_table(path)
    assert isinstance(loaded, LookupTable)
    assert not loaded.smoothed
    np.testing.assert_array_equal(loaded.alloc, lookup.alloc)


def test_incomplete_lookup_cannot_be_saved(tmp_path):
    lookup = LookupTable.empty(BeliefGrid(2, 0.5), 2, 3)
    with pytest.raises(SolverError):
        save_table(tmp_path / "partial.csv", lookup, ["a", "b"])


def test_missing_weight_reports_the_row(tmp_path, two_regime_model, crra, no_short, fast_dp):
    table = solve(two_regime_model, 1, no_short, crra, fast_dp)
    path = save_table(tmp_path / "dp.csv", table, two_regime_model.asset_names)
    lines = path.read_text().splitlines(keepends=True)
    first_data = next(i for i, line in enumerate(lines) if not line.startswith("#")) + 1
    lines[first_data] = lines[first_data].rstrip("\n").rsplit(",", 1)[0] + ",\n"
    path.write_text("".join(lines))

    with pytest.raises(TableFormatError) as excinfo:
        load_table(path)
    assert excinfo.value.row == 1
    assert "row 1" in str(excinfo.value)


def test_version_mismatch_names_both_versions(tmp_path, two_regime_model, crra, no_short, fast_dp):
    table = solve(two_regime_model, 1, no_short, crra, fast_dp)
    path = save_table(tmp_path / "dp.csv", table, two_regime_model.asset_names)
    path.write_text(path.read_text().replace("# version: 1", "# version: 2"))
    with pytest.raises(TableFormatError, match="unsupported version 2, expected 1"):
        load_table(path)


def test_params_round_trip(tmp_path):
    params = NtzParams.initialize(2, 2, np.random.default_rng(5), hidden=6, wealth_feature=True, center_head=True)
    path = save_params(tmp_path / "params.csv", params, "lmcts", 0.005)
    loaded, meta = load_params(path)
    np.testing.assert_array_equal(loaded.vector, params.vector)
    assert loaded.wealth_feature and loaded.center_head
    assert meta["base"] == "lmcts"
    assert float(meta["cost_rate"]) == 0.005


def test_pool_round_trip(tmp_path, two_regime_model):
    grid = BeliefGrid(2, 0.5)
    pool = build_path_pool(two_regime_model, grid, 4, 3, seed=2)
    path = save_pool(tmp_path / "pool.csv", pool)
    loaded = load_pool(path, two_regime_model)
    np.testing.assert_array_equal(loaded.returns, pool.returns)
    np.testing.assert_array_equal(loaded.regimes, pool.regimes)
    np.testing.assert_array_equal(loaded.snaps, pool.snaps)

    other = RegimeModel(mu=[[0.0]], sigma=[[[0.01]]], trans=[[1.0]], rf=0.0)
    with pytest.raises(TableFormatError):
        load_pool(path, other)
