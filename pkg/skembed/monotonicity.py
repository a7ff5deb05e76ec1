"""
Stop-go pair audit of a single-stage optimizer support.

A pair (going prefix, stopped path) at the same level is stop-go when swapping
the decisions strictly increases the reward against every continuation:
    xi(prefix) + xi(stopped + c) > xi(prefix + c) + xi(stopped)   for all c.
Optimal supports contain no such pair. Rewards are read through path summaries
(endpoint, running max, running min, stop time), so continuations that share a
summary are evaluated once.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, List, Tuple

import numpy as np

from config import Config
from skembed.errors import BudgetExceededError
from skembed.lattice import LatticeSpec, PayoffSpec, StoppedPath, SupportSet
from skembed.stopping_dp import forward_support

logger = logging.getLogger(__name__)

Summary = Tuple[int, int, int, int]


def _require_single_stage(paths):
    for path in paths:
        if path.stages != 1:
            raise ValueError("stop-go pairs are defined for single-stage problems only")


def summarize(path: StoppedPath) -> Summary:
    """(endpoint, running max, running min, stop time) of the stopped walk"""
    levels = path.levels()[:path.last_stop + 1]
    return int(levels[-1]), int(levels.max()), int(levels.min()), int(path.last_stop)


@lru_cache(maxsize=16)
def continuation_summaries(horizon: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Distinct (end, max, min, length) of all walks with 1 <= length <= horizon"""
    ends, highs, lows, lengths = [], [], [], []
    frontier = {(0, 0, 0)}
    for length in range(1, horizon + 1):
        nxt = set()
        for end, hi, lo in frontier:
            for step in (1, -1):
                e = end + step
                nxt.add((e, max(hi, e), min(lo, e)))
        frontier = nxt
        for end, hi, lo in sorted(frontier):
            ends.append(end)
            highs.append(hi)
            lows.append(lo)
            lengths.append(length)
    return (np.asarray(ends), np.asarray(highs), np.asarray(lows), np.asarray(lengths))


def prefixes(support: SupportSet) -> FrozenSet[StoppedPath]:
    """All strict-time prefixes of support paths, each stopped at its own length"""
    _require_single_stage(support.paths)
    found = set()
    for path in support.paths:
        for t in range(path.last_stop):
            found.add(StoppedPath(path.increments[:t], (t,)))
    return frozenset(found)


def _margins(prefix: Summary, stopped: Summary, payoff: PayoffSpec, dx: float, horizon: int) -> np.ndarray:
    c_end, c_hi, c_lo, c_len = continuation_summaries(horizon)
    e, p_hi, p_lo, p_t = prefix
    _, s_hi, s_lo, s_t = stopped

    def joined(hi, lo, t):
        return payoff.summary_value(e + c_end, np.maximum(hi, e + c_hi), np.minimum(lo, e + c_lo), t + c_len, dx)

    xi_prefix = payoff.summary_value(e, p_hi, p_lo, p_t, dx)
    xi_stopped = payoff.summary_value(e, s_hi, s_lo, s_t, dx)
    return xi_prefix + joined(s_hi, s_lo, s_t) - joined(p_hi, p_lo, p_t) - xi_stopped


def stop_go_margins(prefix: StoppedPath, stopped: StoppedPath, payoff: PayoffSpec,
                    lattice: LatticeSpec, horizon: int) -> Tuple[float, float]:
    """Smallest and largest swap gain over all continuations"""
    _require_single_stage((prefix, stopped))
    if horizon < 1 or horizon > Config.STOP_GO_MAX_HORIZON:
        raise ValueError(f"continuation horizon must lie in 1..{Config.STOP_GO_MAX_HORIZON}")
    a, b = summarize(prefix), summarize(stopped)
    if a[0] != b[0]:
        raise ValueError(f"endpoint mismatch: {a[0]} vs {b[0]}")
    margins = _margins(a, b, payoff, lattice.dx, horizon)
    return float(margins.min()), float(margins.max())


def is_stop_go(prefix: StoppedPath, stopped: StoppedPath, payoff: PayoffSpec, lattice: LatticeSpec,
               horizon: int, delta: float = Config.STOP_GO_MARGIN, mode: str = 'strict') -> bool:
    """
    strict: every continuation gains at least delta.
    weak: no continuation loses more than delta and at least one gains more than delta.
    """
    low, high = stop_go_margins(prefix, stopped, payoff, lattice, horizon)
    if mode == 'strict':
        return low >= delta
    if mode == 'weak':
        return low >= -delta and high > delta
    raise ValueError(f"unknown stop-go mode {mode}")


@dataclass
class StopGoReport:
    pairs_checked: int = 0
    violations: List[Tuple[StoppedPath, StoppedPath, float]] = field(default_factory=list)
    worst_margin: float = float('-inf')
    horizon: int = 0
    mode: str = 'strict'

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self):
        def path_doc(p):
            return {'increments': list(p.increments), 'stop_times': list(p.stop_times)}

        return {
            'pairs_checked': self.pairs_checked,
            'violations': [
                {'prefix': path_doc(a), 'stopped': path_doc(b), 'margin': margin}
                for a, b, margin in self.violations
            ],
            'worst_margin': None if np.isinf(self.worst_margin) else self.worst_margin,
            'horizon': self.horizon,
            'mode': self.mode,
        }


def check_support(support: SupportSet, payoff: PayoffSpec, lattice: LatticeSpec, horizon: int,
                  delta: float = Config.STOP_GO_MARGIN, mode: str = 'strict',
                  budget: int = Config.PAIR_BUDGET) -> StopGoReport:
    """Test every (prefix, support path) pair with matching endpoints"""
    report = StopGoReport(horizon=horizon, mode=mode)
    if len(support) == 0:
        return report
    _require_single_stage(support.paths)

    by_level: Dict[int, List[StoppedPath]] = {}
    for path in support.paths:
        by_level.setdefault(path.endpoint(), []).append(path)
    pre_by_level: Dict[int, List[StoppedPath]] = {}
    for path in sorted(prefixes(support), key=lambda p: (p.last_stop, p.increments)):
        pre_by_level.setdefault(path.endpoint(), []).append(path)

    total = sum(len(pre_by_level[k]) * len(by_level.get(k, [])) for k in pre_by_level)
    if total > budget:
        raise BudgetExceededError('stop-go pairs', total, budget)

    cache: Dict[Tuple[Summary, Summary], Tuple[float, float]] = {}
    for level in sorted(pre_by_level):
        for pre in pre_by_level[level]:
            a = summarize(pre)
            for stopped in by_level.get(level, []):
                b = summarize(stopped)
                key = (a, b)
                if key not in cache:
                    margins = _margins(a, b, payoff, lattice.dx, horizon)
                    cache[key] = (float(margins.min()), float(margins.max()))
                low, high = cache[key]
                report.pairs_checked += 1
                report.worst_margin = max(report.worst_margin, low)
                hit = low >= delta if mode == 'strict' else (low >= -delta and high > delta)
                if hit:
                    report.violations.append((pre, stopped, low))

    if report.violations:
        logger.info(f"check_support: {len(report.violations)} stop-go pair(s) among {report.pairs_checked}")
    return report


def support_from_solution(report) -> SupportSet:
    """Support path set of a primal solve report, computing it when the report skipped it"""
    if report.support is not None:
        return report.support
    support, _ = forward_support(report.policy)
    return support
