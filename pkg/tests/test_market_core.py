import numpy as np
import pytest

from market_core import (
    BANKRUPTCY_FLOOR,
    EVALUATION_STREAMS,
    SOLVER_STREAMS,
    Constraints,
    FilterStats,
    MarketState,
    ModelValidationError,
    RegimeModel,
    SolverError,
    Stream,
    UtilitySpec,
    assert_disjoint_streams,
    filter_step,
    grow,
    make_rng,
    marginal_utility,
    merton_allocation,
    predict_belief,
    rebalance,
    repair_covariance,
    short_magnitude,
    simulate_paths,
    stationary_distribution,
    turnover,
    update_belief,
    update_belief_from_likelihood,
    utility,
)


# ----------------------------------------------------------------------------
# Modelo
# ----------------------------------------------------------------------------

def test_minimal_model_is_valid():
    model = RegimeModel(mu=[[0.01]], sigma=[[[0.04]]], trans=[[1.0]], rf=0.0)
    assert model.n_regimes == 1
    assert model.n_risky == 1
    assert model.asset_names == ("asset_0",)
    np.testing.assert_array_equal(model.cash_allocation(), [0.0, 1.0])


def test_transition_row_not_summing_to_one_names_the_row():
    with pytest.raises(ModelValidationError) as excinfo:
        RegimeModel(mu=[[0.0], [0.0]], sigma=[[[0.01]], [[0.01]]], trans=[[0.9, 0.1], [0.5, 0.4]], rf=0.0)
    assert excinfo.value.field == "trans[1]"


def test_model_arrays_are_read_only(two_regime_model):
    with pytest.raises(ValueError):
        two_regime_model.mu[0, 0] = 1.0


def test_model_copies_inputs():
    mu = np.array([[0.01]])
    model = RegimeModel(mu=mu, sigma=[[[0.04]]], trans=[[1.0]], rf=0.0)
    mu[0, 0] = 5.0
    assert model.mu[0, 0] == 0.01


def test_covariance_with_clear_negative_eigenvalue_is_rejected():
    cov = np.diag([0.04, -1e-3])
    with pytest.raises(ModelValidationError, match="positive semidefinite"):
        repair_covariance(cov)


def test_tiny_negative_eigenvalue_is_floored():
    cov = np.diag([0.04, -1e-13])
    repaired, factor = repair_covariance(cov)
    assert np.linalg.eigvalsh(repaired).min() >= -1e-15
    np.testing.assert_allclose(factor @ factor.T, repaired, atol=1e-15)


def test_asymmetric_covariance_is_rejected():
    with pytest.raises(ModelValidationError, match="symmetric"):
        repair_covariance(np.array([[0.04, 0.01], [0.0, 0.04]]))


def test_rf_must_exceed_minus_one():
    with pytest.raises(ModelValidationError):
        RegimeModel(mu=[[0.0]], sigma=[[[0.01]]], trans=[[1.0]], rf=-1.0)


def test_stationary_distribution_of_two_state_chain():
    trans = np.array([[0.9, 0.1], [0.3, 0.7]])
    np.testing.assert_allclose(stationary_distribution(trans), [0.75, 0.25], atol=1e-3)


# ----------------------------------------------------------------------------
# Streams
# ----------------------------------------------------------------------------

def test_streams_are_reproducible_and_distinct():
    a = make_rng(5, Stream.EVAL, 3).random(4)
    b = make_rng(5, Stream.EVAL, 3).random(4)
    c = make_rng(5, Stream.DP, 3).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_solver_and_evaluation_streams_are_disjoint():
    assert_disjoint_streams(SOLVER_STREAMS, EVALUATION_STREAMS)
    with pytest.raises(SolverError):
        assert_disjoint_streams(SOLVER_STREAMS, {Stream.EVAL, Stream.POOL})


# ----------------------------------------------------------------------------
# Filtro de creencias
# ----------------------------------------------------------------------------

def test_update_belief_keeps_simplex_under_fuzzing(two_regime_model):
    rng = np.random.default_rng(0)
    m = 20000
    beliefs = rng.dirichlet(np.ones(2), size=m)
    beliefs[: m // 10, 0] = 0.0
    beliefs[: m // 10, 1] = 1.0
    returns = rng.normal(0.0, 0.5, size=(m, 2))
    post = update_belief(two_regime_model, beliefs, returns)
    assert np.all(post >= 0.0)
    assert np.max(np.abs(post.sum(axis=1) - 1.0)) <= 1e-12


def test_update_belief_moves_toward_likely_regime(two_regime_model):
    prior = np.array([0.5, 0.5])
    crash = np.array([-0.15, 0.0])
    post = update_belief(two_regime_model, prior, crash)
    assert post[1] > 0.9


def test_degenerate_likelihood_keeps_prior():
    stats = FilterStats()
    prior = np.array([[0.3, 0.7], [0.6, 0.4]])
    loglik = np.array([[-np.inf, -np.inf], [0.0, -1.0]])
    post = update_belief_from_likelihood(prior, loglik, stats)
    np.testing.assert_array_equal(post[0], prior[0])
    assert stats.underflows == 1


def test_filter_step_is_update_then_predict(two_regime_model):
    belief = np.array([0.2, 0.8])
    r = np.array([0.01, 0.0])
    expected = predict_belief(two_regime_model, update_belief(two_regime_model, belief, r))
    np.testing.assert_allclose(filter_step(two_regime_model, belief, r), expected, rtol=0, atol=0)


# ----------------------------------------------------------------------------
# Simulación, riqueza y costos
# ----------------------------------------------------------------------------

def test_simulated_regimes_follow_the_chain(two_regime_model):
    rng = make_rng(0, Stream.EVAL, 0)
    start = np.zeros(4000, dtype=int)
    returns, regimes = simulate_paths(two_regime_model, start, 3, rng)
    assert returns.shape == (4000, 3, 2)
    assert regimes.shape == (4000, 4)
    stay = np.mean(regimes[:, 1] == 0)
    assert abs(stay - 0.95) < 0.02


def test_grow_drifts_weights_and_flags_bankruptcy():
    wealth = np.array([100.0, 100.0])
    alloc = np.array([[0.5, 0.5], [2.0, -1.0]])
    returns = np.array([[0.1], [-0.6]])
    end, drifted, bankrupt = grow(wealth, alloc, returns, np.zeros(2), floor=1e-4)
    assert end[0] == pytest.approx(105.0)
    np.testing.assert_allclose(drifted[0], [55.0 / 105.0, 50.0 / 105.0])
    assert bankrupt.tolist() == [False, True]
    assert end[1] == 1e-4
    np.testing.assert_array_equal(drifted[1], [0.0, 1.0])


def test_rebalance_cost_uses_l1_turnover_with_cash():
    drifted = np.array([0.6, 0.4])
    target = np.array([0.5, 0.5])
    assert turnover(drifted, target) == pytest.approx(0.2)
    assert rebalance(100.0, drifted, target, 0.01) == pytest.approx(100.0 / 1.002)
    with pytest.raises(ValueError):
        rebalance(100.0, drifted, target, -0.1)



def test_rebalance_worked_example():
    drifted = np.array([0.5, 0.5, 0.0])
    target = np.array([0.25, 0.5, 0.25])
    assert turnover(drifted, target) == pytest.approx(0.5)
    assert rebalance(1000.0, drifted, target, 0.01) == pytest.approx(995.0248756, rel=1e-9)
    assert rebalance(1000.0, drifted, target, 0.0) == 1000.0


def test_market_state_all_cash_is_constant_without_rf():
    model = RegimeModel(mu=[[0.01]], sigma=[[[0.01]]], trans=[[1.0]], rf=0.0)
    rng = make_rng(1, Stream.EVAL, 0)
    state = MarketState.initial(model, 50, 1000.0, [1.0], rng)
    for _ in range(5):
        traded, cost = state.advance(model, np.tile([0.0, 1.0], (50, 1)), 0.01, 1e-3, rng)
        assert np.all(traded == 0.0)
        assert np.all(cost == 0.0)
    np.testing.assert_array_equal(state.wealth, np.full(50, 1000.0))


def test_bankrupt_paths_stop_trading():
    model = RegimeModel(mu=[[-0.9]], sigma=[[[1e-6]]], trans=[[1.0]], rf=0.0)
    rng = make_rng(2, Stream.EVAL, 0)
    state = MarketState.initial(model, 10, 1.0, [1.0], rng)
    floor = BANKRUPTCY_FLOOR
    state.advance(model, np.tile([3.0, -2.0], (10, 1)), 0.0, floor, rng)
    assert not state.alive.any()
    np.testing.assert_array_equal(state.wealth, np.full(10, floor))
    traded, _ = state.advance(model, np.tile([0.5, 0.5], (10, 1)), 0.0, floor, rng)
    assert np.all(traded == 0.0)
    np.testing.assert_array_equal(state.wealth, np.full(10, floor))


# ----------------------------------------------------------------------------
# Restricciones y utilidad
# ----------------------------------------------------------------------------

def test_constraint_bounds():
    lower, upper = Constraints().bounds(2)
    np.testing.assert_array_equal(lower, [0, 0, 0])
    np.testing.assert_array_equal(upper, [1, 1, 1])

    lower, upper = Constraints(allow_short=True, short_limit=1.0, max_weight=0.2).bounds(2)
    np.testing.assert_array_equal(lower, [-1, -1, -1])
    np.testing.assert_array_equal(upper, [0.2, 0.2, 1.0])


def test_feasibility_and_short_magnitude():
    shorting = Constraints(allow_short=True)
    alloc = np.array([[1.5, -0.3, -0.2], [0.5, 0.5, 0.0]])
    assert shorting.is_feasible(alloc).tolist() == [False, True]
    np.testing.assert_allclose(short_magnitude(alloc), [0.5, 0.0])
    assert not Constraints().is_feasible(np.array([0.6, 0.6, -0.2]))


@pytest.mark.parametrize(
    "spec, wealth, expected",
    [
        (UtilitySpec("crra", gamma=-1.0), 2.0, -0.5),
        (UtilitySpec("crra", gamma=0.0), np.e, 1.0),
        (UtilitySpec("log"), 1.0, 0.0),
        (UtilitySpec("goal", goal=1580.0), 1580.0, 1.0),
        (UtilitySpec("goal", goal=1580.0), 1579.99, 0.0),
        (UtilitySpec("smoothed_goal", goal=1580.0), 1580.0, 0.5),
    ],
)
def test_utility_values(spec, wealth, expected):
    assert float(utility(spec, wealth)) == pytest.approx(expected)


def test_crra_rejects_non_positive_wealth():
    with pytest.raises(ValueError):
        utility(UtilitySpec("crra", gamma=-1.0), np.array([1.0, 0.0]))


def test_marginal_utility_matches_finite_difference():
    for spec in (UtilitySpec("crra", gamma=-1.0), UtilitySpec("log"), UtilitySpec("smoothed_goal", goal=1.2, steepness=8.0)):
        w = np.array([0.8, 1.1, 1.5])
        h = 1e-6
        fd = (utility(spec, w + h) - utility(spec, w - h)) / (2 * h)
        np.testing.assert_allclose(marginal_utility(spec, w), fd, rtol=1e-6)


def test_scaled_goal_is_consistent():
    spec = UtilitySpec("smoothed_goal", goal=1580.0, steepness=0.01)
    unit = spec.scaled(1000.0)
    w = np.array([900.0, 1580.0, 2000.0])
    np.testing.assert_allclose(utility(unit, w / 1000.0), utility(spec, w), rtol=1e-12)
    assert UtilitySpec("goal", goal=2.0).smoothed().kind == "smoothed_goal"


def test_merton_allocation_single_asset(single_asset_model):
    alloc = merton_allocation(single_asset_model, 0, -1.0)
    assert alloc[0] == pytest.approx(0.001 / (0.0009 * 2.0))
    assert alloc.sum() == pytest.approx(1.0)
