"""
Discrete measures on the line, call-price curves and market data checks
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from skembed.errors import ArbitrageError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Atomic probability measure: strictly increasing positions, positive masses summing to one"""

    positions: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1)
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if positions.size == 0:
            raise ValueError("a measure needs at least one atom")
        if positions.shape != masses.shape:
            raise ValueError("positions and masses differ in length")
        if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(masses)):
            raise ValueError("atoms must be finite")
        if np.any(np.diff(positions) <= 0):
            raise ValueError("positions must be strictly increasing")
        if np.any(masses <= 0):
            raise ValueError("masses must be strictly positive")
        if abs(masses.sum() - 1.0) > Config.MEASURE_TOL * max(1, masses.size):
            raise ValueError(f"masses sum to {masses.sum():.15g}, not 1")
        positions.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'masses', masses)

    @classmethod
    def from_atoms(cls, atoms: Iterable[Tuple[float, float]], normalize: bool = False,
                   drop_below: float = 0.0) -> 'DiscreteMeasure':
        """
        Build a measure from (position, mass) pairs in any order.

        Repeated positions are merged and masses at or below drop_below are discarded.
        With normalize=True the remaining masses are rescaled to sum to one.
        """
        pairs = np.asarray(list(atoms), dtype=float).reshape(-1, 2)
        positions, inverse = np.unique(pairs[:, 0], return_inverse=True)
        masses = np.zeros(positions.size)
        np.add.at(masses, inverse, pairs[:, 1])
        keep = masses > drop_below
        positions, masses = positions[keep], masses[keep]
        if normalize:
            masses = masses / masses.sum()
        return cls(positions, masses)

    @classmethod
    def dirac(cls, x: float = 0.0) -> 'DiscreteMeasure':
        return cls(np.array([float(x)]), np.array([1.0]))

    @property
    def atoms(self) -> List[Tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.masses.tolist()))

    @property
    def size(self) -> int:
        return int(self.positions.size)

    def support_within(self, radius: float, slack: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.positions) <= radius + slack))

    def allclose(self, other: 'DiscreteMeasure', atol: float = 1e-10) -> bool:
        return (self.size == other.size
                and np.allclose(self.positions, other.positions, atol=atol, rtol=0)
                and np.allclose(self.masses, other.masses, atol=atol, rtol=0))

    def __repr__(self):
        return f"DiscreteMeasure({self.atoms})"


@dataclass(frozen=True)
class MarketData:
    """Strikes K (n, strictly increasing), call prices C (m x n) and an optional power constraint (p, V)"""

    strikes: np.ndarray
    calls: np.ndarray
    power: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        strikes = np.asarray(self.strikes, dtype=float).reshape(-1)
        calls = np.asarray(self.calls, dtype=float)
        if calls.ndim == 1:
            calls = calls.reshape(1, -1)
        if strikes.size == 0:
            raise SchemaError('strikes', 'at least one strike is required')
        if np.any(np.diff(strikes) <= 0):
            raise SchemaError('strikes', 'strikes must be strictly increasing')
        if calls.ndim != 2 or calls.shape[1] != strikes.size:
            raise SchemaError('calls', f'expected rows of length {strikes.size}')
        if np.any(calls < 0) or not np.all(np.isfinite(calls)):
            raise SchemaError('calls', 'call prices must be finite and nonnegative')
        if self.power is not None:
            p, V = (float(v) for v in self.power)
            if not p > 1:
                raise SchemaError('power.p', 'p must be > 1')
            if not V > 0:
                raise SchemaError('power.V', 'V must be > 0')
            object.__setattr__(self, 'power', (p, V))
        strikes.setflags(write=False)
        calls.setflags(write=False)
        object.__setattr__(self, 'strikes', strikes)
        object.__setattr__(self, 'calls', calls)

    @property
    def m(self) -> int:
        return int(self.calls.shape[0])

    @property
    def n(self) -> int:
        return int(self.strikes.size)

    @property
    def q(self) -> Optional[float]:
        if self.power is None:
            return None
        p = self.power[0]
        return p / (p - 1.0)

    def without_power(self) -> 'MarketData':
        return MarketData(self.strikes, self.calls, None)


@dataclass(frozen=True)
class Violation:
    tag: str
    indices: Tuple[float, ...]
    slack: float
    boundary: bool = False

    def to_dict(self):
        return {'tag': self.tag, 'indices': list(self.indices),
                'slack': self.slack, 'boundary': self.boundary}


@dataclass
class ArbitrageVerdict:
    """ok exactly when no violation was recorded; boundary-only failures set the boundary flag"""

    violations: List[Violation] = field(default_factory=list)
    centered: Optional[bool] = None
    min_slack: float = float('inf')

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def boundary(self) -> bool:
        return bool(self.violations) and all(v.boundary for v in self.violations)

    def tags(self) -> List[str]:
        return [v.tag for v in self.violations]

    def to_dict(self):
        return {
            'ok': self.ok,
            'boundary': self.boundary,
            'centered': self.centered,
            'min_slack': None if np.isinf(self.min_slack) else self.min_slack,
            'violations': [v.to_dict() for v in self.violations],
        }


def mean(mu: DiscreteMeasure) -> float:
    return float(np.dot(mu.masses, mu.positions))


def call_price(mu: DiscreteMeasure, strike):
    """E[(X - K)+] for a scalar strike or an array of strikes"""
    strikes = np.asarray(strike, dtype=float)
    payoff = np.maximum(mu.positions[None, :] - strikes.reshape(-1, 1), 0.0)
    prices = payoff @ mu.masses
    if strikes.ndim == 0:
        return float(prices[0])
    return prices.reshape(strikes.shape)


def power_moment(mu: DiscreteMeasure, p: float) -> float:
    if p < 1:
        raise ValueError("power moments are defined here for p >= 1")
    return float(np.dot(mu.masses, np.abs(mu.positions) ** p))


def cdf(mu: DiscreteMeasure, x):
    """Right-continuous distribution function"""
    cum = np.cumsum(mu.masses)
    idx = np.searchsorted(mu.positions, np.asarray(x, dtype=float), side='right')
    values = np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)
    values = np.minimum(values, 1.0)
    return float(values) if np.ndim(values) == 0 else values


def quantile(mu: DiscreteMeasure, u: float) -> float:
    """Left-continuous generalized inverse: inf{x : F(x) >= u}"""
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    cum = np.cumsum(mu.masses)
    idx = int(np.searchsorted(cum, u - 1e-12, side='left'))
    return float(mu.positions[min(idx, mu.size - 1)])


def _record(verdict: ArbitrageVerdict, tag, indices, slack, delta):
    """Strict condition slack > delta; within +-delta is a boundary case"""
    verdict.min_slack = min(verdict.min_slack, float(slack))
    if slack > delta:
        return
    verdict.violations.append(Violation(tag, tuple(indices), float(slack), boundary=slack >= -delta))


def peacock_check(mus: Sequence[DiscreteMeasure], tol: float = 1e-9) -> ArbitrageVerdict:
    """Convex order check: equal means and call prices nondecreasing in i at every atom"""
    if len(mus) == 0:
        raise ValueError("peacock_check needs at least one measure")

    verdict = ArbitrageVerdict()
    means = [mean(mu) for mu in mus]
    verdict.centered = all(abs(v) <= tol for v in means)

    knots = np.unique(np.concatenate([mu.positions for mu in mus]))
    for i in range(len(mus) - 1):
        gap = abs(means[i + 1] - means[i])
        if gap > tol:
            verdict.violations.append(Violation('mean', (i, i + 1), -gap))
        diff = call_price(mus[i + 1], knots) - call_price(mus[i], knots)
        for k in np.flatnonzero(diff < -tol):
            verdict.violations.append(Violation('convex_order', (i, float(knots[k])), float(diff[k])))
        if diff.size:
            verdict.min_slack = min(verdict.min_slack, float(diff.min()))

    return verdict


def arbitrage_check(market: MarketData, delta: float = Config.ARBITRAGE_SLACK) -> ArbitrageVerdict:
    """
    Membership of the call matrix in the open no-arbitrage set.

    Per strike, prices strictly increase with maturity; per maturity they strictly
    decrease in strike, stay strictly above (-K)+, and the call-slope chain satisfies
    -1 < s_1 < ... < s_{n-1} < 0. Conditions within delta of equality are reported
    as boundary violations.
    """
    K, C = market.strikes, market.calls
    verdict = ArbitrageVerdict()

    for i in range(market.m):
        row = C[i]
        if i > 0:
            for j in range(market.n):
                _record(verdict, 'maturity_order', (i - 1, i, j), row[j] - C[i - 1, j], delta)
        for j in range(market.n):
            _record(verdict, 'intrinsic', (i, j), row[j] - max(-K[j], 0.0), delta)
        if market.n < 2:
            continue
        for j in range(market.n - 1):
            _record(verdict, 'strike_order', (i, j, j + 1), row[j] - row[j + 1], delta)
        slopes = np.diff(row) / np.diff(K)
        _record(verdict, 'slope_lower', (i, 0), slopes[0] + 1.0, delta)
        _record(verdict, 'slope_upper', (i, market.n - 2), -slopes[-1], delta)
        for j in range(1, slopes.size):
            _record(verdict, 'convexity', (i, j - 1, j, j + 1), slopes[j] - slopes[j - 1], delta)

    if not verdict.ok:
        logger.debug(f"arbitrage_check: {len(verdict.violations)} violation(s), boundary={verdict.boundary}")
    return verdict


def truncate(mu: DiscreteMeasure, R: float) -> DiscreteMeasure:
    """Law of (-R) v (R ^ X)"""
    if not R > 0:
        raise ValueError("R must be > 0")
    clipped = np.clip(mu.positions, -R, R)
    return DiscreteMeasure.from_atoms(zip(clipped, mu.masses))


def carr_madan_replicate(f_second_derivative: Callable, support: Tuple[float, float],
                         x: float, knots: int) -> float:
    """
    Trapezoid approximation of f(x) = int f''(K) (x - K)+ dK.

    Knots are uniform on the support interval with x added as an extra knot when it
    falls inside, so the kink of the integrand sits on the grid.
    """
    a, b = (float(v) for v in support)
    if not a < b:
        raise ValueError(f"invalid interval [{a}, {b}]")
    if knots < 2:
        raise ValueError("knots must be >= 2")

    grid = np.linspace(a, b, int(knots))
    if a < x < b:
        grid = np.union1d(grid, [x])
    second = np.asarray(np.vectorize(f_second_derivative, otypes=[float])(grid), dtype=float)
    integrand = second * np.maximum(x - grid, 0.0)
    return float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(grid)))


def measure_from_calls(market: MarketData, maturity_row: int, tol: float = 1e-10) -> DiscreteMeasure:
    """
    Centered measure whose piecewise-linear call curve interpolates one maturity row.

    Atoms sit on the strikes; a left tail atom where the first segment meets the line
    -K and a right tail atom where the last segment meets zero close the curve with
    end slopes -1 and 0. A single strike gets the symmetric two-atom solution.
    """
    K = market.strikes
    C = market.calls[maturity_row]

    if market.n == 1:
        k, c = float(K[0]), float(C[0])
        if c - max(-k, 0.0) <= tol:
            return DiscreteMeasure.dirac(0.0)
        d = 2.0 * c + k
        p_left = (c + k) / d
        return DiscreteMeasure.from_atoms([(k - d, p_left), (k + d, 1.0 - p_left)])

    slopes = np.diff(C) / np.diff(K)
    for j in range(1, slopes.size):
        if slopes[j] < slopes[j - 1] - tol:
            raise ArbitrageError(
                f"negative butterfly at strikes ({K[j - 1]:g}, {K[j]:g}, {K[j + 1]:g}) in row {maturity_row}: "
                f"slopes {slopes[j - 1]:.6g} > {slopes[j]:.6g}"
            )
    if slopes[0] < -1.0 - tol:
        raise ArbitrageError(f"call slope below -1 between strikes {K[0]:g} and {K[1]:g} in row {maturity_row}")
    if slopes[-1] > tol:
        raise ArbitrageError(f"call prices increase between strikes {K[-2]:g} and {K[-1]:g} in row {maturity_row}")

    # slope_left[k] is the curve slope just left of points[k]; one extra entry for the right end
    points = list(K)
    slope_left = [-1.0]
    if C[0] + K[0] > tol and slopes[0] > -1.0 + tol:
        points.insert(0, (slopes[0] * K[0] - C[0]) / (1.0 + slopes[0]))
        slope_left.append(slopes[0])
    slope_left.extend(slopes.tolist())

    if C[-1] > tol:
        if slopes[-1] >= -tol:
            raise ArbitrageError(f"call prices never reach zero beyond strike {K[-1]:g} in row {maturity_row}")
        points.append(K[-1] - C[-1] / slopes[-1])
        slope_left.append(slopes[-1])
    slope_left.append(0.0)

    masses = np.diff(np.asarray(slope_left))
    atoms = [(x, w) for x, w in zip(points, masses) if w > 1e-12]
    if not atoms:
        return DiscreteMeasure.dirac(0.0)
    return DiscreteMeasure.from_atoms(atoms, normalize=True)
