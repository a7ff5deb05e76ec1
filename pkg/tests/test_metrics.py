"""
Tests for the distances and the explicit bound formulas
"""
import math

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import wasserstein_distance

from helpers import random_measure
from skembed.errors import SupportError
from skembed.measures import DiscreteMeasure, power_moment
from skembed.metrics import (
    calls_sup_gap,
    levy_prokhorov,
    marginal_gap_bound,
    metric_report,
    multi_marginal_stability_bound,
    one_marginal_stability_bound,
    rate_certificate,
    second_moment_gap_bound,
    wasserstein1,
)


def coupling_cost(mu, nu):
    """W1 as the optimal transport linear program"""
    a, b = mu.size, nu.size
    cost = np.abs(mu.positions[:, None] - nu.positions[None, :]).reshape(-1)
    rows = []
    for i in range(a):
        row = np.zeros((a, b))
        row[i, :] = 1.0
        rows.append(row.reshape(-1))
    for j in range(b):
        row = np.zeros((a, b))
        row[:, j] = 1.0
        rows.append(row.reshape(-1))
    rhs = np.concatenate([mu.masses, nu.masses])
    result = linprog(cost, A_eq=np.array(rows), b_eq=rhs, bounds=(0, None), method='highs')
    assert result.status == 0
    return result.fun


def test_identical_measures_are_at_distance_zero(binomial4):
    assert levy_prokhorov(binomial4, binomial4) == 0.0
    assert wasserstein1(binomial4, binomial4) == 0.0
    assert calls_sup_gap(binomial4, binomial4, 4.0) == 0.0


def test_levy_prokhorov_of_shifted_diracs():
    assert levy_prokhorov(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(0.3)) == pytest.approx(0.3, abs=1e-9)
    assert levy_prokhorov(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(5.0)) == pytest.approx(1.0, abs=1e-9)


def test_levy_prokhorov_is_symmetric(rng):
    for _ in range(20):
        mu, nu = random_measure(rng, 4), random_measure(rng, 5)
        assert levy_prokhorov(mu, nu) == pytest.approx(levy_prokhorov(nu, mu), abs=1e-10)



def test_distances_satisfy_the_triangle_inequality(rng):
    for _ in range(20):
        a, b, c = random_measure(rng, 3), random_measure(rng, 4), random_measure(rng, 5)
        assert levy_prokhorov(a, c) <= levy_prokhorov(a, b) + levy_prokhorov(b, c) + 1e-9
        assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-9


def test_wasserstein_of_shifted_diracs():
    assert wasserstein1(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0)) == pytest.approx(1.0)


def test_wasserstein_matches_scipy(rng):
    for _ in range(200):
        mu = random_measure(rng, int(rng.integers(1, 7)))
        nu = random_measure(rng, int(rng.integers(1, 7)))
        expected = wasserstein_distance(mu.positions, nu.positions, mu.masses, nu.masses)
        assert wasserstein1(mu, nu) == pytest.approx(expected, abs=1e-9)


def test_wasserstein_matches_coupling_lp(rng):
    for _ in range(50):
        mu = random_measure(rng, int(rng.integers(1, 7)))
        nu = random_measure(rng, int(rng.integers(1, 7)))
        assert wasserstein1(mu, nu) == pytest.approx(coupling_cost(mu, nu), abs=1e-7)


def test_calls_sup_gap_of_pair_against_dirac(symmetric_pair):
    # c_pair - c_dirac peaks at K = 0 where it equals 1/2
    assert calls_sup_gap(symmetric_pair, DiscreteMeasure.dirac(), 1.0) == pytest.approx(0.5)


def test_metric_report_default_window(symmetric_pair):
    report = metric_report(symmetric_pair, DiscreteMeasure.from_atoms([(-2, 0.5), (2, 0.5)]))
    assert report.window == 2.0
    assert report.w1 == pytest.approx(1.0)
    assert report.calls_sup_gap == pytest.approx(0.5)


@pytest.mark.parametrize('R', [1.0, 5.0])
def test_rate_certificate_holds_on_random_pairs(rng, R):
    for _ in range(250):
        mu = random_measure(rng, int(rng.integers(1, 6)), spread=R)
        nu = random_measure(rng, int(rng.integers(1, 6)), spread=R)
        cert = rate_certificate(mu, nu, R)
        assert cert.holds, cert
        assert cert.rho_bound == pytest.approx(math.sqrt(2 * cert.epsilon))


def test_rate_certificate_requires_support_in_window(binomial4):
    with pytest.raises(SupportError):
        rate_certificate(binomial4, binomial4, 1.0)


def test_marginal_gap_bound_golden_values():
    rho_bound, w_bound = marginal_gap_bound((10.0, 0.1), 4.0, 3.0)
    assert rho_bound == pytest.approx(0.473886382647969, rel=1e-12)
    assert w_bound == pytest.approx(13.392560424545209, rel=1e-12)


def test_marginal_gap_bound_rejects_degenerate_grids():
    with pytest.raises(ValueError):
        marginal_gap_bound((0.0, 0.1), 4.0, 3.0)
    with pytest.raises(ValueError):
        marginal_gap_bound((1.0, 0.1), 1.0, 3.0)


def test_second_moment_gap_bound_dominates(rng):
    p = 4.0
    for _ in range(200):
        mu = random_measure(rng, int(rng.integers(1, 6)))
        nu = random_measure(rng, int(rng.integers(1, 6)))
        V = max(power_moment(mu, p), power_moment(nu, p))
        gap = abs(power_moment(mu, 2) - power_moment(nu, 2))
        assert gap <= second_moment_gap_bound(wasserstein1(mu, nu), p, V) + 1e-12


def test_second_moment_gap_bound_edges():
    assert second_moment_gap_bound(0.0, 4.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        second_moment_gap_bound(0.1, 2.0, 1.0)


def test_stability_bounds():
    assert one_marginal_stability_bound(0.0, 1.0, 2.0, 4.0, 3.0) == 0.0
    # at rho = 1 every power of rho is one
    assert one_marginal_stability_bound(1.0, 1.0, 2.0, 4.0, 16.0) == pytest.approx(1.0 + 4.0 + 8.0 * 2.0)
    assert multi_marginal_stability_bound([0.0, 0.0], 1.0, 2.0, 4.0, 3.0) == 0.0
    assert multi_marginal_stability_bound([0.5], 1.0, 1.0, 4.0, 1.0) == pytest.approx(
        4 * 0.5 + second_moment_gap_bound(0.5, 4.0, 1.0))
