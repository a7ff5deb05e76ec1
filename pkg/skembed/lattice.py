"""
Scaled random-walk path space, stopped paths, capped payoffs and the path metric
"""
import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from skembed.errors import BudgetExceededError, QuantizationError
from skembed.measures import DiscreteMeasure

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatticeSpec:
    """N steps of a +-dx walk; dt = dx^2 so every step has variance dt"""

    steps: int
    dx: float = 1.0
    stages: int = 1

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        if not self.dx > 0:
            raise ValueError("dx must be > 0")
        if int(self.stages) < 1:
            raise ValueError("stages must be >= 1")
        object.__setattr__(self, 'steps', int(self.steps))
        object.__setattr__(self, 'stages', int(self.stages))
        object.__setattr__(self, 'dx', float(self.dx))

    @classmethod
    def from_dt(cls, steps: int, dt: float, stages: int = 1) -> 'LatticeSpec':
        if not dt > 0:
            raise ValueError("dt must be > 0")
        return cls(steps, math.sqrt(dt), stages)

    @property
    def dt(self) -> float:
        return self.dx * self.dx

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    def to_dict(self):
        return {'steps': self.steps, 'dt': self.dt, 'dx': self.dx, 'stages': self.stages}


@dataclass(frozen=True)
class StoppedPath:
    """
    Walk increments (+1, -1, or 0 for a hold step) with ordered stop times, in steps.

    Increments past the last stop time are allowed and never affect a payoff.
    """

    increments: Tuple[int, ...]
    stop_times: Tuple[int, ...]

    def __post_init__(self):
        increments = tuple(int(v) for v in self.increments)
        stops = tuple(int(v) for v in self.stop_times)
        if any(v not in (-1, 0, 1) for v in increments):
            raise ValueError("increments must be -1, 0 or +1")
        if not stops:
            raise ValueError("at least one stop time is required")
        if stops[0] < 0 or any(b < a for a, b in zip(stops, stops[1:])):
            raise ValueError("stop times must be nonnegative and nondecreasing")
        if stops[-1] > len(increments):
            raise ValueError("last stop time exceeds the path length")
        object.__setattr__(self, 'increments', increments)
        object.__setattr__(self, 'stop_times', stops)

    @property
    def stages(self) -> int:
        return len(self.stop_times)

    @property
    def last_stop(self) -> int:
        return self.stop_times[-1]

    def levels(self) -> np.ndarray:
        """Walk position in lattice units at times 0..len(increments)"""
        return np.concatenate([[0], np.cumsum(self.increments, dtype=np.int64)])

    def endpoint(self, stage: int = -1) -> int:
        return int(sum(self.increments[:self.stop_times[stage]]))


@dataclass(frozen=True)
class SupportSet:
    """Stopped paths charged by a stopping measure, with their masses"""

    paths: Tuple[StoppedPath, ...] = ()
    masses: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.paths) != len(self.masses):
            raise ValueError("paths and masses differ in length")

    def __len__(self):
        return len(self.paths)

    @property
    def total_mass(self) -> float:
        return float(sum(self.masses))


class PayoffKind(str, Enum):
    LOOKBACK_MAX_CAPPED = 'LOOKBACK_MAX_CAPPED'
    STOPPED_ABS_CAPPED = 'STOPPED_ABS_CAPPED'
    RANGE_CAPPED = 'RANGE_CAPPED'
    FORWARD_STRADDLE_CAPPED = 'FORWARD_STRADDLE_CAPPED'
    TIME_SQUARED_CAPPED = 'TIME_SQUARED_CAPPED'


@dataclass(frozen=True)
class PayoffSpec:
    """
    Capped nonanticipative reward on stopped paths.

    The graph methods (initial_aux, advance, on_stop, terminal) carry the minimal
    path memory each kind needs: the running max for LOOKBACK, max and min for
    RANGE, the first stop level for FORWARD_STRADDLE.
    """

    kind: PayoffKind
    cap: float

    def __post_init__(self):
        object.__setattr__(self, 'kind', PayoffKind(self.kind))
        if not self.cap > 0:
            raise ValueError("cap must be > 0")
        object.__setattr__(self, 'cap', float(self.cap))

    @property
    def lipschitz(self) -> float:
        """Certified constant for |Phi(a) - Phi(b)| <= L d_bar(a, b)"""
        if self.kind == PayoffKind.RANGE_CAPPED:
            return 2.0
        if self.kind == PayoffKind.TIME_SQUARED_CAPPED:
            return 2.0 * self.cap ** 0.75
        return 1.0

    @property
    def sup_norm(self) -> float:
        return self.cap

    @property
    def time_invariant(self) -> bool:
        return self.kind != PayoffKind.TIME_SQUARED_CAPPED

    def check_stages(self, stages: int):
        if self.kind == PayoffKind.FORWARD_STRADDLE_CAPPED and stages < 2:
            raise ValueError("FORWARD_STRADDLE_CAPPED needs at least two stages")

    def to_dict(self):
        return {'kind': self.kind.value, 'cap': self.cap}

    # -- state-graph interface -------------------------------------------

    def initial_aux(self) -> tuple:
        if self.kind == PayoffKind.LOOKBACK_MAX_CAPPED:
            return (0,)
        if self.kind == PayoffKind.RANGE_CAPPED:
            return (0, 0)
        return ()

    def advance(self, aux: tuple, level: int) -> tuple:
        if self.kind == PayoffKind.LOOKBACK_MAX_CAPPED:
            return (max(aux[0], level),)
        if self.kind == PayoffKind.RANGE_CAPPED:
            return (max(aux[0], level), min(aux[1], level))
        return aux

    def on_stop(self, stage: int, aux: tuple, level: int) -> tuple:
        """Memory after stage `stage` (1-based) stops at `level`"""
        if self.kind == PayoffKind.FORWARD_STRADDLE_CAPPED:
            if stage == 1:
                return (level,)
            if stage == 2:
                return (abs(level - aux[0]),)
        return aux

    def terminal(self, t: int, level: int, aux: tuple, dx: float) -> float:
        """Reward once the last stage has stopped at (t, level) with memory aux"""
        kind = self.kind
        if kind == PayoffKind.LOOKBACK_MAX_CAPPED:
            raw = aux[0] * dx
        elif kind == PayoffKind.STOPPED_ABS_CAPPED:
            raw = abs(level) * dx
        elif kind == PayoffKind.RANGE_CAPPED:
            raw = (aux[0] - aux[1]) * dx
        elif kind == PayoffKind.FORWARD_STRADDLE_CAPPED:
            raw = aux[0] * dx
        else:
            raw = (t * dx * dx) ** 2
        return min(raw, self.cap)

    def summary_value(self, end, high, low, length, dx: float) -> np.ndarray:
        """Vectorized one-stage reward from (endpoint, running max, running min, stop time)"""
        kind = self.kind
        if kind == PayoffKind.LOOKBACK_MAX_CAPPED:
            raw = np.asarray(high, dtype=float) * dx
        elif kind == PayoffKind.STOPPED_ABS_CAPPED:
            raw = np.abs(np.asarray(end, dtype=float)) * dx
        elif kind == PayoffKind.RANGE_CAPPED:
            raw = (np.asarray(high, dtype=float) - np.asarray(low, dtype=float)) * dx
        elif kind == PayoffKind.TIME_SQUARED_CAPPED:
            raw = (np.asarray(length, dtype=float) * dx * dx) ** 2
        else:
            raise ValueError(f"{kind.value} is not a one-stage reward")
        return np.minimum(raw, self.cap)


def evaluate(payoff: PayoffSpec, path: StoppedPath, dx: float) -> float:
    """Reward of a stopped path; only the walk up to the last stop time is read"""
    levels = path.levels()[:path.last_stop + 1]
    kind = payoff.kind
    if kind == PayoffKind.LOOKBACK_MAX_CAPPED:
        raw = levels.max() * dx
    elif kind == PayoffKind.STOPPED_ABS_CAPPED:
        raw = abs(levels[-1]) * dx
    elif kind == PayoffKind.RANGE_CAPPED:
        raw = (levels.max() - levels.min()) * dx
    elif kind == PayoffKind.FORWARD_STRADDLE_CAPPED:
        if path.stages < 2:
            raise ValueError("FORWARD_STRADDLE_CAPPED needs two stop times")
        raw = abs(levels[path.stop_times[1]] - levels[path.stop_times[0]]) * dx
    else:
        raw = (path.last_stop * dx * dx) ** 2
    return float(min(raw, payoff.cap))


def hold(path: StoppedPath, at: int) -> StoppedPath:
    """Insert a zero increment at step `at`; stop times after it move one step later"""
    if not 0 <= at <= len(path.increments):
        raise ValueError("hold position outside the path")
    increments = path.increments[:at] + (0,) + path.increments[at:]
    stops = tuple(s + 1 if s > at else s for s in path.stop_times)
    return StoppedPath(increments, stops)


def count_paths(spec: LatticeSpec) -> int:
    return (2 ** spec.steps) * math.comb(spec.steps + spec.stages, spec.stages)


def enumerate_paths(spec: LatticeSpec, budget: int = Config.PATH_BUDGET) -> List[Tuple[StoppedPath, float]]:
    """
    Every full-length increment sequence crossed with every ordered stop vector.

    Each path carries weight 2^-N, so the weights for one fixed stop vector sum to one.
    """
    if spec.steps > Config.ENUMERATION_MAX_STEPS:
        raise BudgetExceededError('enumeration steps', spec.steps, Config.ENUMERATION_MAX_STEPS)
    total = count_paths(spec)
    if total > budget:
        raise BudgetExceededError('stopped paths', total, budget)

    weight = 2.0 ** (-spec.steps)
    stop_vectors = list(itertools.combinations_with_replacement(range(spec.steps + 1), spec.stages))
    paths = []
    for increments in itertools.product((1, -1), repeat=spec.steps):
        for stops in stop_vectors:
            paths.append((StoppedPath(increments, stops), weight))
    return paths


def d_bar(a: StoppedPath, b: StoppedPath, dx: float) -> float:
    """Sum over stages of sqrt(|time gap|) plus the sup distance of the two stopped walks"""
    if a.stages != b.stages:
        raise ValueError("paths have different numbers of stages")
    dt = dx * dx
    la, lb = a.levels(), b.levels()
    total = 0.0
    for ta, tb in zip(a.stop_times, b.stop_times):
        clock = np.arange(max(ta, tb) + 1)
        wa = la[np.minimum(clock, ta)]
        wb = lb[np.minimum(clock, tb)]
        total += math.sqrt(abs(ta - tb) * dt) + float(np.abs(wa - wb).max()) * dx
    return total


def random_path(rng: np.random.Generator, spec: LatticeSpec) -> StoppedPath:
    increments = tuple(int(v) for v in rng.choice((-1, 1), size=spec.steps))
    stops = tuple(sorted(int(v) for v in rng.integers(0, spec.steps + 1, size=spec.stages)))
    return StoppedPath(increments, stops)


def _neighbour(rng: np.random.Generator, path: StoppedPath, spec: LatticeSpec) -> StoppedPath:
    """Small perturbation: move one stop time by a step or flip one increment"""
    increments = list(path.increments)
    stops = list(path.stop_times)
    if rng.random() < 0.5:
        i = int(rng.integers(spec.stages))
        lo = stops[i - 1] if i > 0 else 0
        hi = stops[i + 1] if i + 1 < spec.stages else spec.steps
        stops[i] = int(np.clip(stops[i] + rng.choice((-1, 1)), lo, hi))
    else:
        j = int(rng.integers(spec.steps))
        increments[j] = -increments[j]
    return StoppedPath(tuple(increments), tuple(stops))


def lipschitz_audit(payoff: PayoffSpec, spec: LatticeSpec, pairs: int,
                    rng: np.random.Generator) -> Tuple[float, bool]:
    """Largest observed |Phi(a) - Phi(b)| / d_bar(a, b) over random and nearby pairs"""
    payoff.check_stages(spec.stages)
    worst = 0.0
    for n in range(pairs):
        a = random_path(rng, spec)
        b = _neighbour(rng, a, spec) if n % 2 else random_path(rng, spec)
        dist = d_bar(a, b, spec.dx)
        if dist == 0:
            continue
        ratio = abs(evaluate(payoff, a, spec.dx) - evaluate(payoff, b, spec.dx)) / dist
        worst = max(worst, ratio)
    ok = worst <= payoff.lipschitz + 1e-12
    if not ok:
        logger.warning(f"Lipschitz audit failed for {payoff.kind.value}: ratio {worst:.6g} > {payoff.lipschitz}")
    return worst, ok


def quantize(mu: DiscreteMeasure, spec: LatticeSpec, tol: float = 1e-9) -> DiscreteMeasure:
    """
    Mean-preserving projection onto the lattice levels k*dx, |k| <= N.

    Each atom is split between its two neighbouring levels; atoms already on the
    lattice are left alone.
    """
    atoms = []
    limit = spec.steps
    for x, w in mu.atoms:
        u = x / spec.dx
        k = round(u)
        if abs(u - k) <= tol:
            if abs(k) > limit:
                raise QuantizationError(f"atom {x:g} lies outside the lattice range +-{limit * spec.dx:g}")
            atoms.append((k * spec.dx, w))
            continue
        lo = math.floor(u)
        hi = lo + 1
        if lo < -limit or hi > limit:
            raise QuantizationError(f"atom {x:g} lies outside the lattice range +-{limit * spec.dx:g}")
        atoms.append((lo * spec.dx, w * (hi - u)))
        atoms.append((hi * spec.dx, w * (u - lo)))
    return DiscreteMeasure.from_atoms(atoms)
