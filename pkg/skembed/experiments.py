"""
Convergence and rate harness: nested strike grids, stability runs, measure
recovery from call prices and fitted-constant rate audits.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from skembed.errors import InfeasibleError
from skembed.lattice import LatticeSpec, PayoffSpec, quantize
from skembed.measures import DiscreteMeasure, MarketData, call_price, measure_from_calls, power_moment
from skembed.metrics import (
    calls_sup_gap,
    levy_prokhorov,
    marginal_gap_bound,
    multi_marginal_stability_bound,
    one_marginal_stability_bound,
    wasserstein1,
)
from skembed.primal_lp import ConstraintMode, solve_primal

logger = logging.getLogger(__name__)

RATE_COLUMNS = ['n', 'bound_K', 'mesh_K', 'value', 'gap', 'theory_bound']
SCHEDULE_KINDS = ('STAB', 'STAB2')


@dataclass
class GridSchedule:
    """Nested strike grids with their (bound, mesh) statistics"""

    kind: str
    grids: List[np.ndarray]
    p: Optional[float] = None

    def __post_init__(self):
        for coarse, fine in zip(self.grids, self.grids[1:]):
            if not np.all(np.isin(coarse, fine)):
                raise ValueError("strike grids are not nested")

    @property
    def stats(self) -> List[Tuple[float, float]]:
        return [grid_stats(grid) for grid in self.grids]

    def __len__(self):
        return len(self.grids)


def grid_stats(strikes) -> Tuple[float, float]:
    """(|K|, dK): the smaller of K_1^- and K_n^+, and the largest spacing"""
    strikes = np.asarray(strikes, dtype=float)
    bound = min(max(-strikes[0], 0.0), max(strikes[-1], 0.0))
    mesh = float(np.diff(strikes).max()) if strikes.size > 1 else float('inf')
    return bound, mesh


def make_schedule(kind: str, levels: int, base_width: float, p: Optional[float] = None,
                  base_step: float = 1.0) -> GridSchedule:
    """
    Level l covers [-w_l, w_l] with spacing h_l, all points multiples of h_l.

    STAB:  w_l = a 2^(l/2), h_l = h0 2^-ceil(l/2)   (bound -> inf, mesh -> 0)
    STAB2: w_l = a 2^(l/4), h_l = h0 2^-l           (|K| sqrt(dK) -> 0 as well)
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind}")
    if levels < 2:
        raise ValueError("a schedule needs at least two levels")
    if not base_width > 0 or not base_step > 0:
        raise ValueError("base width and step must be > 0")

    if kind == 'STAB':
        exponents = [math.ceil(l / 2) for l in range(levels)]
        widths = [base_width * 2 ** (l / 2) for l in range(levels)]
    else:
        exponents = list(range(levels))
        widths = [base_width * 2 ** (l / 4) for l in range(levels)]

    # integer units of the finest spacing keep the grids exactly nested
    finest = exponents[-1]
    unit = base_step * 2.0 ** (-finest)
    grids = []
    for width, e in zip(widths, exponents):
        stride = 2 ** (finest - e)
        reach = int(math.floor(width / (base_step * 2.0 ** (-e)) + 1e-9))
        grids.append(unit * stride * np.arange(-reach, reach + 1))
    return GridSchedule(kind, grids, p)


def calls_from_measure(mus: Sequence[DiscreteMeasure], strikes, p: Optional[float] = None) -> MarketData:
    """Exact call prices of each marginal at the strikes; V = mu_m(|x|^p) when p is given"""
    strikes = np.asarray(strikes, dtype=float)
    calls = np.vstack([call_price(mu, strikes) for mu in mus])
    power = None if p is None else (p, power_moment(mus[-1], p))
    return MarketData(strikes, calls, power)


def one_marginal_envelope(bound_K: float, mesh_K: float, p: float) -> float:
    q = p / (p - 1.0)
    return mesh_K ** (1.0 / (4.0 * q)) + bound_K ** (-p / (4.0 * q * q))


def multi_marginal_envelope(bound_K: float, mesh_K: float, p: float) -> float:
    q = p / (p - 1.0)
    r = (p - 2.0) / (p - 1.0)
    return bound_K ** r * (math.sqrt(mesh_K) + bound_K ** (-p / (2.0 * q))) ** r


def envelope_for(stages: int) -> str:
    return 'one_marginal' if stages == 1 else 'multi_marginal'


def coverage_label(stages: int, payoff: PayoffSpec, p: float) -> str:
    """UNCOVERED when the run sits outside the hypotheses of the matching rate statement"""
    if stages == 1:
        return 'COVERED' if payoff.time_invariant else 'UNCOVERED'
    return 'COVERED' if p > 3 else 'UNCOVERED'


@dataclass
class RateTable:
    rows: List[Dict[str, Any]]
    reference: float
    envelope: str
    label: str
    p: float
    use_power: bool
    slope: Optional[float] = None
    quantized: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=RATE_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def write_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.12g')

    def to_dict(self):
        return {
            'rows': self.rows,
            'reference': self.reference,
            'envelope': self.envelope,
            'label': self.label,
            'p': self.p,
            'use_power': self.use_power,
            'slope': self.slope,
            'quantized': self.quantized,
        }


def fitted_slope(gaps: np.ndarray, bounds: np.ndarray, floor: float = 1e-9) -> Optional[float]:
    """Least-squares slope of log(gap) against log(bound) over positive gaps"""
    keep = (gaps > floor) & (bounds > 0)
    if np.count_nonzero(keep) < 2 or np.ptp(np.log(bounds[keep])) == 0:
        return None
    slope, _ = np.polyfit(np.log(bounds[keep]), np.log(gaps[keep]), 1)
    return float(slope)


def _solve_level(n: int, grid: np.ndarray, mus, payoff, lattice, use_power, p, reference, lp_opts):
    stats = grid_stats(grid)
    plain = solve_primal(ConstraintMode.calls(calls_from_measure(mus, grid)), lattice, payoff,
                         with_paths=False, **lp_opts)
    if not plain.optimal:
        raise InfeasibleError(f"level {n}: P is {plain.status.value}")
    row = {'n': n, 'bound_K': stats[0], 'mesh_K': stats[1], 'p_value': plain.value}
    value = plain.value
    if use_power:
        powered = solve_primal(ConstraintMode.calls(calls_from_measure(mus, grid, p)), lattice, payoff,
                               with_paths=False, **lp_opts)
        if not powered.optimal:
            raise InfeasibleError(f"level {n}: P^V is {powered.status.value}")
        row['pv_value'] = powered.value
        value = powered.value
    row['value'] = value
    row['gap'] = value - reference
    return row


def _stability_bound(stages, rho_bound, w_bound, payoff, p, V) -> Optional[float]:
    if rho_bound is None:
        return None
    if stages == 1:
        return one_marginal_stability_bound(rho_bound, payoff.lipschitz, payoff.sup_norm, p, V)
    if not p > 2:
        return None
    return multi_marginal_stability_bound([w_bound] * stages, payoff.lipschitz, payoff.sup_norm, p, V)


def convergence_run(mus: Sequence[DiscreteMeasure], payoff: PayoffSpec, schedule: GridSchedule,
                    lattice: LatticeSpec, use_power: bool = False, p: Optional[float] = None,
                    workers: int = Config.CONVERGE_WORKERS,
                    lp_opts: Optional[Dict[str, Any]] = None) -> RateTable:
    """
    Solve P (or P^V) on every level and compare with P(mu) on the same lattice.

    The level calls and V are priced from the lattice-quantized marginals, the
    same laws the reference P(mu) embeds; table.quantized says whether that moved
    any atom. Each row also carries the stability bound on |value - P(mu)| implied
    by the row's marginal gap bounds.

    Levels run on a thread pool; rows are assembled by level index so the table
    does not depend on completion order.
    """
    p = p if p is not None else (schedule.p if schedule.p is not None else 4.0)
    lp_opts = lp_opts or {}
    ref = solve_primal(ConstraintMode.of_marginals(mus), lattice, payoff, with_paths=False, **lp_opts)
    if not ref.optimal:
        raise InfeasibleError(f"P(mu) is {ref.status.value} on this lattice")
    reference = ref.value
    priced = [quantize(mu, lattice) for mu in mus]
    quantized = not all(q.allclose(mu) for q, mu in zip(priced, mus))
    if quantized:
        logger.info("convergence_run: marginals moved onto the lattice before pricing the calls")
    V = power_moment(priced[-1], p)
    stages = len(mus)
    envelope = envelope_for(stages)
    bound_fn = one_marginal_envelope if stages == 1 else multi_marginal_envelope

    results: Dict[int, Dict[str, Any]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {
            executor.submit(_solve_level, n, grid, priced, payoff, lattice, use_power, p, reference, lp_opts): n
            for n, grid in enumerate(schedule.grids)
        }
        for future in as_completed(futures):
            n = futures[future]
            results[n] = future.result()
            logger.info(f"convergence_run: level {n} value {results[n]['value']:.10g} gap {results[n]['gap']:.3e}")

    rows = []
    for n in sorted(results):
        row = results[n]
        rho_bound, w_bound = marginal_gap_bound((row['bound_K'], row['mesh_K']), p, V) if row['bound_K'] > 0 else (None, None)
        row.update({
            'theory_bound': bound_fn(row['bound_K'], row['mesh_K'], p) if row['bound_K'] > 0 else float('inf'),
            'reference': reference,
            'rho_bound': rho_bound,
            'w_bound': w_bound,
            'stability_bound': _stability_bound(stages, rho_bound, w_bound, payoff, p, V),
        })
        rows.append(row)

    table = RateTable(rows, reference, envelope, coverage_label(stages, payoff, p), p, use_power, quantized=quantized)
    table.slope = fitted_slope(table.column('gap'), table.column('theory_bound'))
    return table


@dataclass
class AuditVerdict:
    passed: bool
    constant: float
    slope: Optional[float]
    max_ratio: float
    rows_used: int
    envelope: str
    label: str
    factor: float
    negative_gaps: List[int] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def rate_audit(table: RateTable, p: Optional[float] = None, envelope: Optional[str] = None,
               factor: float = Config.RATE_AUDIT_FACTOR, solver_tol: float = 2e-6) -> AuditVerdict:
    """
    Fit one constant C by least squares in log space, log C = mean(log(gap / bound)),
    and pass when every gap is within factor * C * bound. Gaps below -solver_tol fail
    the audit outright; gaps within solver_tol of zero carry no rate information.
    """
    p = p if p is not None else table.p
    envelope = envelope or table.envelope
    gaps = table.column('gap')
    if envelope == table.envelope and p == table.p:
        bounds = table.column('theory_bound')
    else:
        fn = one_marginal_envelope if envelope == 'one_marginal' else multi_marginal_envelope
        bounds = np.array([fn(r['bound_K'], r['mesh_K'], p) for r in table.rows])

    negative = [int(r['n']) for r, g in zip(table.rows, gaps) if g < -solver_tol]
    keep = (gaps > solver_tol) & np.isfinite(bounds) & (bounds > 0)
    if np.any(keep):
        ratios = gaps[keep] / bounds[keep]
        constant = float(np.exp(np.mean(np.log(ratios))))
        max_ratio = float(ratios.max())
    else:
        constant, max_ratio = 0.0, 0.0

    passed = not negative and max_ratio <= factor * constant * (1.0 + 1e-12)
    label = table.label
    if envelope != table.envelope:
        label = 'UNCOVERED' if (envelope == 'multi_marginal' and p <= 3) else label
    return AuditVerdict(
        passed=passed,
        constant=constant,
        slope=fitted_slope(gaps, bounds, solver_tol),
        max_ratio=max_ratio,
        rows_used=int(np.count_nonzero(keep)),
        envelope=envelope,
        label=label,
        factor=factor,
        negative_gaps=negative,
    )


def recovery_run(mu: DiscreteMeasure, schedule: GridSchedule, p: Optional[float] = None) -> pd.DataFrame:
    """Per level: rebuild mu from its call prices on the grid and measure the distance"""
    p = p if p is not None else (schedule.p if schedule.p is not None else 4.0)
    V = power_moment(mu, p)
    rows = []
    for n, grid in enumerate(schedule.grids):
        market = calls_from_measure([mu], grid)
        rebuilt = measure_from_calls(market, 0)
        bound_K, mesh_K = grid_stats(grid)
        row = {
            'n': n,
            'bound_K': bound_K,
            'mesh_K': mesh_K,
            'rho': levy_prokhorov(rebuilt, mu),
            'w1': wasserstein1(rebuilt, mu),
            'calls_sup_gap': calls_sup_gap(rebuilt, mu, bound_K) if bound_K > 0 else 0.0,
            'atoms': rebuilt.size,
        }
        if bound_K > 0:
            row['rho_bound'], row['w_bound'] = marginal_gap_bound((bound_K, mesh_K), p, V)
        rows.append(row)
        logger.debug(f"recovery_run: level {n} rho {row['rho']:.3e} W {row['w1']:.3e}")
    return pd.DataFrame(rows)
