"""
Tests for backward induction, policy evaluation and the superhedge certificate
"""
import json

import numpy as np
import pytest

from helpers import brute_force_value, interior_market
from skembed.errors import BudgetExceededError
from skembed.lattice import LatticeSpec, PayoffSpec, enumerate_paths
from skembed.measures import MarketData, call_price
from skembed.stopping_dp import (
    InnerProblem,
    MultiplierMatrix,
    StateGraph,
    StoppingPolicy,
    dump_table,
    extract_certificate,
    force_action,
    forward_support,
    path_residual,
    policy_objective,
    policy_value,
    solve_inner,
    state_graph,
)

ONE_STAGE = ['LOOKBACK_MAX_CAPPED', 'STOPPED_ABS_CAPPED', 'RANGE_CAPPED', 'TIME_SQUARED_CAPPED']


def flat_market(stages, strikes=(-0.5, 0.5)):
    strikes = np.asarray(strikes, dtype=float)
    return MarketData(strikes, np.ones((stages, strikes.size)))


def problem_with(lattice, payoff, market, alpha=None):
    alpha = MultiplierMatrix.zeros(market.m, market.n) if alpha is None else alpha
    return InnerProblem(lattice, payoff, alpha, market)


def call_leg(market, alpha, dx):
    def leg(stage, level):
        x = level * dx
        return -float(np.maximum(x - market.strikes, 0.0) @ alpha.alpha[stage - 1])
    return leg


def test_state_graph_counts():
    graph = StateGraph(LatticeSpec(3), PayoffSpec('STOPPED_ABS_CAPPED', 10))
    assert graph.decision_nodes().size == 10
    assert graph.size == 20
    assert graph.root == 0
    assert graph.phi[graph.terminal].max() == 3.0


def test_state_graph_budget():
    with pytest.raises(BudgetExceededError):
        StateGraph(LatticeSpec(12), PayoffSpec('RANGE_CAPPED', 10), budget=100)


@pytest.mark.parametrize('kind', ONE_STAGE)
@pytest.mark.parametrize('steps', [1, 2, 3, 4])
def test_inner_matches_brute_force_without_multipliers(kind, steps):
    lattice = LatticeSpec(steps, 0.5)
    payoff = PayoffSpec(kind, 1.2)
    value, _, _ = solve_inner(problem_with(lattice, payoff, flat_market(1)))
    assert value == pytest.approx(brute_force_value(payoff, lattice), abs=1e-12)


@pytest.mark.parametrize('kind', ['LOOKBACK_MAX_CAPPED', 'RANGE_CAPPED', 'FORWARD_STRADDLE_CAPPED'])
def test_inner_matches_brute_force_two_stages(rng, kind):
    lattice = LatticeSpec(4, 1.0, 2)
    payoff = PayoffSpec(kind, 2.5)
    market = flat_market(2, (-1.5, 0.5, 1.5))
    for _ in range(3):
        alpha = MultiplierMatrix(rng.normal(scale=0.4, size=(2, 3)))
        value, _, _ = solve_inner(problem_with(lattice, payoff, market, alpha))
        assert value == pytest.approx(brute_force_value(payoff, lattice, call_leg(market, alpha, 1.0)), abs=1e-12)


@pytest.mark.parametrize('kind', ONE_STAGE)
def test_inner_matches_brute_force_with_multipliers(rng, kind):
    lattice = LatticeSpec(4, 1.0)
    payoff = PayoffSpec(kind, 3.0)
    market = flat_market(1, (-2.5, -0.5, 0.5, 2.5))
    for _ in range(5):
        alpha = MultiplierMatrix(rng.normal(scale=0.5, size=(1, 4)))
        value, _, _ = solve_inner(problem_with(lattice, payoff, market, alpha))
        assert value == pytest.approx(brute_force_value(payoff, lattice, call_leg(market, alpha, 1.0)), abs=1e-12)


def test_power_multiplier_enters_last_stage(rng):
    lattice = LatticeSpec(4)
    payoff = PayoffSpec('LOOKBACK_MAX_CAPPED', 3.0)
    market = MarketData([0.5], [[1.0]], (4.0, 2.0))
    mult = MultiplierMatrix([[0.1]], beta=0.05)
    value, _, stats = solve_inner(problem_with(lattice, payoff, market, mult))

    def leg(stage, level):
        return -0.1 * max(level - 0.5, 0.0) - 0.05 * abs(level) ** 4

    assert value == pytest.approx(brute_force_value(payoff, lattice, leg), abs=1e-12)
    assert stats.power_expectation is not None


def test_optimal_policy_attains_value(rng):
    mus, market = interior_market(rng, 6, 3)
    lattice = LatticeSpec(6)
    payoff = PayoffSpec('LOOKBACK_MAX_CAPPED', 4.0)
    alpha = MultiplierMatrix(rng.normal(scale=0.3, size=(1, 3)))
    problem = problem_with(lattice, payoff, market, alpha)
    value, policy, stats = solve_inner(problem)
    assert policy.deterministic
    assert policy_objective(problem, policy) == pytest.approx(value, abs=1e-12)

    evaluated = policy_value(policy, market)
    assert evaluated['expected_payoff'] == pytest.approx(stats.expected_payoff)
    np.testing.assert_allclose(evaluated['call_expectations'], stats.call_expectations, atol=1e-12)
    # call expectations are the call prices of the stopped law
    np.testing.assert_allclose(stats.call_expectations[0], call_price(stats.marginals[0], market.strikes), atol=1e-12)


def test_zero_multipliers_give_expected_payoff():
    lattice = LatticeSpec(5)
    payoff = PayoffSpec('RANGE_CAPPED', 3.0)
    value, _, stats = solve_inner(problem_with(lattice, payoff, flat_market(1)))
    assert value == pytest.approx(stats.expected_payoff)


POWERED = MarketData([-0.5, 0.5, 1.5], np.ones((1, 3)), (4.0, 2.0))


def inner_value(lattice, payoff, vec):
    mult = MultiplierMatrix.from_vector(vec, 1, 3)
    value, _, stats = solve_inner(problem_with(lattice, payoff, POWERED, mult))
    # value is a max of affine functions of the multipliers with these slopes
    slope = -np.append(stats.call_expectations.reshape(-1), stats.power_expectation)
    return value, slope


def random_multipliers(rng):
    vec = rng.normal(scale=0.5, size=4)
    vec[-1] *= 0.01
    return vec


@pytest.mark.parametrize('kind', ['LOOKBACK_MAX_CAPPED', 'RANGE_CAPPED'])
def test_inner_value_is_convex_in_the_multipliers(rng, kind):
    lattice = LatticeSpec(5)
    payoff = PayoffSpec(kind, 3.0)
    for _ in range(10):
        a, b = random_multipliers(rng), random_multipliers(rng)
        mid, _ = inner_value(lattice, payoff, 0.5 * (a + b))
        ga, _ = inner_value(lattice, payoff, a)
        gb, _ = inner_value(lattice, payoff, b)
        assert mid <= 0.5 * (ga + gb) + 1e-10


@pytest.mark.parametrize('kind', ['LOOKBACK_MAX_CAPPED', 'STOPPED_ABS_CAPPED', 'TIME_SQUARED_CAPPED'])
def test_stopped_expectations_are_subgradients(rng, kind):
    lattice = LatticeSpec(5)
    payoff = PayoffSpec(kind, 3.0)
    for _ in range(10):
        a, b = random_multipliers(rng), random_multipliers(rng)
        ga, slope = inner_value(lattice, payoff, a)
        gb, _ = inner_value(lattice, payoff, b)
        assert gb >= ga + slope @ (b - a) - 1e-9


def test_value_is_stable_under_horizon_doubling():
    # -(x + 50)+ + 2 x+ = |x| - 50 on the reachable range, so the hedged reward is min(|x|, 2) - |x| + 50
    payoff = PayoffSpec('STOPPED_ABS_CAPPED', 2.0)
    market = flat_market(1, (-50.0, 0.0))
    hedge = MultiplierMatrix([[-1.0, 2.0]])
    short, _, _ = solve_inner(problem_with(LatticeSpec(6), payoff, market, hedge))
    long, _, _ = solve_inner(problem_with(LatticeSpec(12), payoff, market, hedge))
    assert short == pytest.approx(50.0, abs=1e-12)
    assert long == pytest.approx(short, abs=1e-12)

    # without a hedge a longer horizon only adds stopping rules
    values = [solve_inner(problem_with(LatticeSpec(n), payoff, market))[0] for n in (3, 6, 12)]
    assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12
    assert values[2] <= 2.0


def test_ties_resolve_to_stop():
    # stopped |x| with zero multipliers: away from the boundary at 0 the two actions tie
    lattice = LatticeSpec(3)
    payoff = PayoffSpec('STOPPED_ABS_CAPPED', 100)
    value, policy, stats = solve_inner(problem_with(lattice, payoff, flat_market(1)))
    graph = policy.graph
    assert policy.action(graph.root) == 'CONTINUE'
    assert stats.ties > 0
    assert [policy.action(i) for i in graph.find(1, 2, 2)] == ['STOP']
    assert [policy.action(i) for i in graph.find(1, 1, 1)] == ['CONTINUE']
    assert value == pytest.approx(1.5)


def test_force_action_lowers_objective(rng):
    mus, market = interior_market(rng, 6, 3)
    lattice = LatticeSpec(6)
    payoff = PayoffSpec('RANGE_CAPPED', 4.0)
    problem = problem_with(lattice, payoff, market, MultiplierMatrix(rng.normal(scale=0.3, size=(1, 3))))
    value, policy, _ = solve_inner(problem)
    flipped = 'CONTINUE' if policy.action(policy.graph.root) == 'STOP' else 'STOP'
    forced = force_action(policy, 1, 0, 0, flipped)
    assert policy_objective(problem, forced) <= value + 1e-12
    assert forced.tie_rule['forced'] == [1, 0, 0]
    with pytest.raises(ValueError):
        force_action(policy, 1, 6, 0, 'CONTINUE')
    with pytest.raises(KeyError):
        force_action(policy, 1, 1, 0, 'STOP')


def test_forward_support_matches_marginals(rng):
    mus, market = interior_market(rng, 5, 2)
    lattice = LatticeSpec(5)
    payoff = PayoffSpec('LOOKBACK_MAX_CAPPED', 4.0)
    _, policy, stats = solve_inner(problem_with(lattice, payoff, market, MultiplierMatrix(rng.normal(size=(1, 2)))))
    support, marginals = forward_support(policy)
    assert support.total_mass == pytest.approx(1.0)
    ends = {}
    for path, w in zip(support.paths, support.masses):
        ends[float(path.endpoint())] = ends.get(float(path.endpoint()), 0.0) + w
    for x, w in marginals[0].atoms:
        assert ends[x] == pytest.approx(w)
    assert marginals[0].allclose(stats.marginals[0])


def test_forward_support_two_stages():
    lattice = LatticeSpec(3, 1.0, 2)
    graph = state_graph(lattice, PayoffSpec('LOOKBACK_MAX_CAPPED', 5.0))
    probs = np.zeros(graph.size)
    probs[graph.time_arr == 3] = 1.0
    probs[(graph.stage_arr == 1) & (graph.time_arr == 1)] = 1.0
    support, marginals = forward_support(StoppingPolicy(graph, probs))
    assert all(path.stop_times[0] == 1 for path in support.paths)
    assert all(path.stop_times[1] == 3 for path in support.paths)
    assert marginals[0].atoms == [(-1.0, 0.5), (1.0, 0.5)]


@pytest.mark.parametrize('kind,stages', [
    ('LOOKBACK_MAX_CAPPED', 1),
    ('TIME_SQUARED_CAPPED', 1),
    ('RANGE_CAPPED', 2),
    ('FORWARD_STRADDLE_CAPPED', 2),
])
def test_certificate_residuals(rng, kind, stages):
    lattice = LatticeSpec(4, 1.0, stages)
    payoff = PayoffSpec(kind, 3.0)
    market = flat_market(stages, (-1.5, 0.5, 1.5))
    alpha = MultiplierMatrix(rng.normal(scale=0.4, size=(stages, 3)))
    problem = problem_with(lattice, payoff, market, alpha)
    value, _, stats = solve_inner(problem)
    cert = extract_certificate(problem, stats.table)
    assert cert.ok
    assert cert.s0 == pytest.approx(value)
    assert cert.min_state_residual >= -1e-12

    residuals = [path_residual(cert, path) for path, _ in enumerate_paths(lattice)]
    assert min(residuals) >= -1e-10
    assert min(residuals) == pytest.approx(cert.min_path_residual, abs=1e-10)


def test_certificate_detects_understated_value(rng):
    lattice = LatticeSpec(4)
    payoff = PayoffSpec('RANGE_CAPPED', 3.0)
    problem = problem_with(lattice, payoff, flat_market(1))
    _, _, stats = solve_inner(problem)
    cert = extract_certificate(problem, stats.table.perturbed(-0.01))
    assert not cert.ok
    assert cert.min_residual == pytest.approx(-0.01)


def test_dump_table(tmp_path):
    lattice = LatticeSpec(2)
    _, _, stats = solve_inner(problem_with(lattice, PayoffSpec('RANGE_CAPPED', 3.0), flat_market(1)))
    target = tmp_path / 'table.json'
    dump_table(stats.table, str(target))
    doc = json.loads(target.read_text())
    assert doc['skembed_schema'] == 1
    assert len(doc['states']) == stats.states
    root = [s for s in doc['states'] if s['t'] == 0 and s['stage'] == 1][0]
    assert root['value'] == pytest.approx(stats.table.root_value)
