"""
Tests for measures, call curves and the market data checks
"""
import numpy as np
import pytest

from helpers import binomial, lattice_measures, random_measure
from skembed.errors import ArbitrageError, SchemaError
from skembed.measures import (
    DiscreteMeasure,
    MarketData,
    arbitrage_check,
    call_price,
    carr_madan_replicate,
    cdf,
    mean,
    measure_from_calls,
    peacock_check,
    power_moment,
    quantile,
    truncate,
)


def test_measure_rejects_bad_atoms():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.0, 1.0]), np.array([1.0, 0.0]))


def test_from_atoms_merges_repeated_positions():
    mu = DiscreteMeasure.from_atoms([(1, 0.25), (-1, 0.5), (1, 0.25)])
    assert mu.atoms == [(-1.0, 0.5), (1.0, 0.5)]


def test_call_price_of_symmetric_pair(symmetric_pair):
    assert call_price(symmetric_pair, 0.0) == pytest.approx(0.5)
    assert call_price(symmetric_pair, -2.0) == pytest.approx(2.0)
    assert call_price(symmetric_pair, 1.0) == 0.0
    np.testing.assert_allclose(call_price(symmetric_pair, [-1.0, 0.0, 1.0]), [1.0, 0.5, 0.0])


def test_call_curve_shape(rng):
    for _ in range(20):
        mu = random_measure(rng, int(rng.integers(1, 8)), centered=True)
        strikes = np.linspace(-8, 8, 161)
        calls = call_price(mu, strikes)
        slopes = np.diff(calls) / np.diff(strikes)
        assert np.all(np.diff(slopes) >= -1e-12)
        assert np.all(slopes >= -1 - 1e-12) and np.all(slopes <= 1e-12)
        # below the support the curve is the forward line
        assert calls[0] == pytest.approx(mean(mu) - strikes[0])


def test_cdf_and_quantile_at_atoms(symmetric_pair):
    assert cdf(DiscreteMeasure.dirac(), -0.5) == 0.0
    assert cdf(DiscreteMeasure.dirac(), 0.0) == 1.0
    assert quantile(symmetric_pair, 0.5) == -1.0
    assert quantile(symmetric_pair, 0.75) == 1.0


def test_quantile_inverts_cdf_on_atoms(rng):
    mu = random_measure(rng, 6)
    for x in mu.positions:
        assert quantile(mu, cdf(mu, x)) == x


def test_power_moment(binomial4):
    assert power_moment(binomial4, 2) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        power_moment(binomial4, 0.5)


def test_peacock_accepts_dirac_then_pair(symmetric_pair):
    verdict = peacock_check([DiscreteMeasure.dirac(), symmetric_pair])
    assert verdict.ok
    assert verdict.centered


def test_peacock_rejects_reversed_order(symmetric_pair):
    verdict = peacock_check([symmetric_pair, DiscreteMeasure.dirac()])
    assert not verdict.ok
    assert ('convex_order', (0, 0.0)) in [(v.tag, v.indices) for v in verdict.violations]


def test_peacock_rejects_mean_shift():
    verdict = peacock_check([DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0)])
    assert 'mean' in verdict.tags()
    assert verdict.centered is False


def test_arbitrage_check_interior_market():
    market = MarketData([-0.5, 0.0, 0.5], [[0.625, 0.25, 0.125]])
    verdict = arbitrage_check(market)
    assert verdict.ok
    assert verdict.min_slack > 0


def test_arbitrage_check_flags_boundary_market():
    # calls of the +-1 pair: zero price at K = 1 and a kink-free segment
    market = MarketData([-1.0, 0.0, 1.0], [[1.0, 0.5, 0.0]])
    verdict = arbitrage_check(market)
    assert not verdict.ok
    assert verdict.boundary


def test_arbitrage_check_flags_butterfly():
    market = MarketData([-1.0, 0.0, 1.0], [[1.0, 0.9, 0.0]])
    verdict = arbitrage_check(market)
    assert 'convexity' in verdict.tags()
    assert not verdict.boundary


def test_arbitrage_check_maturity_order():
    market = MarketData([-0.5, 0.0, 0.5], [[0.625, 0.25, 0.125], [0.625, 0.2, 0.125]])
    tags = arbitrage_check(market).tags()
    assert 'maturity_order' in tags


def test_market_data_schema_errors():
    with pytest.raises(SchemaError) as e:
        MarketData([1.0, 0.0], [[0.5, 0.1]])
    assert e.value.field == 'strikes'
    with pytest.raises(SchemaError) as e:
        MarketData([0.0, 1.0], [[0.5, 0.1, 0.0]])
    assert e.value.field == 'calls'
    with pytest.raises(SchemaError) as e:
        MarketData([0.0], [[0.5]], (1.0, 2.0))
    assert e.value.field == 'power.p'


def test_truncate_clips_and_merges():
    mu = DiscreteMeasure.from_atoms([(-3, 0.25), (0, 0.5), (3, 0.25)])
    assert truncate(mu, 2).atoms == [(-2.0, 0.25), (0.0, 0.5), (2.0, 0.25)]
    assert truncate(mu, 0.5).atoms == [(-0.5, 0.25), (0.0, 0.5), (0.5, 0.25)]
    with pytest.raises(ValueError):
        truncate(mu, 0)


def test_carr_madan_replicates_smooth_function():
    def f2(k):
        return 12 * k * k - 4

    # f(x) = (1 - x^2)^2 has f(-1) = f'(-1) = 0, so f(0) = 1
    assert carr_madan_replicate(f2, (-1.0, 1.0), 0.0, 2001) == pytest.approx(1.0, abs=1e-4)
    assert carr_madan_replicate(f2, (-1.0, 1.0), -2.0, 101) == 0.0


def test_carr_madan_error_decays_quadratically():
    def f2(k):
        return 12 * k * k - 4

    knots = np.array([41, 81, 161])
    errors = np.array([abs(carr_madan_replicate(f2, (-1.0, 1.0), 0.0, n) - 1.0) for n in knots])
    slope = np.polyfit(np.log(knots), np.log(errors), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.3)


def test_measure_from_calls_recovers_binomial(binomial4):
    strikes = np.arange(-4.0, 5.0)
    market = MarketData(strikes, [call_price(binomial4, strikes)])
    assert measure_from_calls(market, 0).allclose(binomial4)


def test_measure_from_calls_recovers_lattice_measures(rng):
    for _ in range(10):
        mu = lattice_measures(rng, 6)[0]
        strikes = np.arange(-6.0, 7.0)
        market = MarketData(strikes, [call_price(mu, strikes)])
        rebuilt = measure_from_calls(market, 0)
        assert rebuilt.allclose(mu, atol=1e-9)


def test_measure_from_calls_adds_tail_atoms():
    mu = binomial(4)
    strikes = np.array([-1.0, 0.0, 1.0])
    rebuilt = measure_from_calls(MarketData(strikes, [call_price(mu, strikes)]), 0)
    np.testing.assert_allclose(call_price(rebuilt, strikes), call_price(mu, strikes), atol=1e-12)
    assert mean(rebuilt) == pytest.approx(0.0, abs=1e-12)
    assert rebuilt.positions[0] < -1 and rebuilt.positions[-1] > 1


def test_measure_from_calls_single_strike():
    rebuilt = measure_from_calls(MarketData([0.0], [[0.5]]), 0)
    assert rebuilt.allclose(DiscreteMeasure.from_atoms([(-1, 0.5), (1, 0.5)]))
    assert measure_from_calls(MarketData([0.0], [[0.0]]), 0).atoms == [(0.0, 1.0)]


def test_measure_from_calls_rejects_butterfly():
    with pytest.raises(ArbitrageError, match='butterfly'):
        measure_from_calls(MarketData([-1.0, 0.0, 1.0], [[1.0, 0.9, 0.0]]), 0)
