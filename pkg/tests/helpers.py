"""
Instance generators and brute-force oracles used across the suite
"""
from math import comb

import numpy as np

from skembed.lattice import LatticeSpec, PayoffSpec, StoppedPath, evaluate
from skembed.measures import DiscreteMeasure, MarketData, arbitrage_check, call_price
from skembed.stopping_dp import StoppingPolicy, propagate, stage_marginals, state_graph


def binomial(steps):
    """Law of a simple walk after `steps` steps, in lattice units"""
    return DiscreteMeasure.from_atoms([(2 * k - steps, comb(steps, k) / 2 ** steps) for k in range(steps + 1)])


def lattice_measures(rng, steps, stages=1, stop_rate=0.35):
    """Stopped laws of a random deterministic policy on a dx = 1 lattice (embeddable by construction)"""
    lattice = LatticeSpec(steps, 1.0, stages)
    graph = state_graph(lattice, PayoffSpec('STOPPED_ABS_CAPPED', 1e6))
    probs = (rng.random(graph.size) < stop_rate).astype(float)
    probs[graph.time_arr == steps] = 1.0
    probs[graph.root] = 0.0
    flow = propagate(StoppingPolicy(graph, probs))
    return stage_marginals(graph, flow.stop_mass)


def interior_market(rng, steps, n_strikes, stages=1, tries=500):
    """Call prices of lattice-embeddable marginals at half-integer strikes, interior to the no-arbitrage set"""
    for _ in range(tries):
        mus = lattice_measures(rng, steps, stages)
        first = mus[0]
        lo, hi = first.positions[0], first.positions[-1]
        candidates = np.arange(lo, hi) + 0.5
        if candidates.size < n_strikes:
            continue
        strikes = np.sort(rng.choice(candidates, size=n_strikes, replace=False))
        calls = np.vstack([call_price(mu, strikes) for mu in mus])
        market = MarketData(strikes, calls)
        if arbitrage_check(market).ok:
            return mus, market
    raise RuntimeError('no interior market found')


def random_measure(rng, atoms, spread=3.0, centered=False):
    positions = np.sort(rng.choice(np.linspace(-spread, spread, 400), size=atoms, replace=False))
    masses = rng.random(atoms) + 0.05
    masses /= masses.sum()
    if centered:
        positions = positions - np.dot(masses, positions)
    return DiscreteMeasure(positions, masses)


def brute_force_value(payoff, lattice, stop_leg=None):
    """
    Exhaustive maximum over every history-dependent deterministic stopping rule.

    stop_leg(stage, level) is added to the reward whenever stage `stage` stops.
    """
    m, N, dx = lattice.stages, lattice.steps, lattice.dx

    def best(increments, stops):
        t = len(increments)
        stage = len(stops) + 1
        if stage > m:
            return evaluate(payoff, StoppedPath(increments, stops), dx)
        level = sum(increments)
        leg = stop_leg(stage, level) if stop_leg is not None else 0.0
        options = [leg + best(increments, stops + (t,))]
        if t < N:
            options.append(0.5 * (best(increments + (1,), stops) + best(increments + (-1,), stops)))
        return max(options)

    return best((), ())
