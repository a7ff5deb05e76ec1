"""
Outer convex minimization over static-hedge multipliers.

F(alpha, beta) = sup_tau E[Phi - alpha.(B_T - K)+ - beta |B_Tm|^p] + alpha.C + beta V
is minimized by Polyak-type projections onto the level set of the latest
subgradient cut and one aggregated cut. The inner supremum is an exact backward
induction, so every iterate gives a valid upper bound.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from skembed.errors import ArbitrageError
from skembed.lattice import LatticeSpec, PayoffSpec
from skembed.measures import DiscreteMeasure, MarketData, arbitrage_check, call_price, peacock_check
from skembed.stopping_dp import (
    DualCertificate,
    InnerProblem,
    MultiplierMatrix,
    extract_certificate,
    solve_inner,
    state_graph,
)

logger = logging.getLogger(__name__)

__all__ = [
    'DualOptions', 'DualReport', 'DualStatus', 'MultiplierMatrix', 'PiecewiseLinear',
    'solve_dual', 'solve_dual_measure', 'verify_certificate',
]

Cut = Tuple[np.ndarray, float]


class DualStatus(str, Enum):
    CONVERGED = 'CONVERGED'
    NOT_CONVERGED = 'NOT_CONVERGED'


@dataclass
class DualOptions:
    tol: float = Config.DUAL_TOL
    window: int = Config.DUAL_WINDOW
    max_iters: int = Config.DUAL_MAX_ITERS
    gap_tol: float = Config.DUAL_GAP_TOL
    target: Optional[float] = None
    initial: Optional[MultiplierMatrix] = None
    trace: bool = False
    check_arbitrage: bool = True
    use_power: bool = True


@dataclass
class PiecewiseLinear:
    """Continuous piecewise-linear function given by knot values and the two end slopes"""

    knots: np.ndarray
    values: np.ndarray
    left_slope: float
    right_slope: float

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.knots.size != self.values.size or np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing and match the values")

    @classmethod
    def from_calls(cls, knots, weights) -> 'PiecewiseLinear':
        """lambda(x) = sum_j w_j (x - K_j)+"""
        knots = np.asarray(knots, dtype=float)
        weights = np.asarray(weights, dtype=float)
        values = np.maximum(knots[:, None] - knots[None, :], 0.0) @ weights
        return cls(knots, values, 0.0, float(weights.sum()))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.interp(x, self.knots, self.values)
        left = self.values[0] + self.left_slope * (x - self.knots[0])
        right = self.values[-1] + self.right_slope * (x - self.knots[-1])
        out = np.where(x < self.knots[0], left, np.where(x > self.knots[-1], right, inside))
        return float(out) if out.ndim == 0 else out

    @property
    def lipschitz(self) -> float:
        slopes = np.diff(self.values) / np.diff(self.knots) if self.knots.size > 1 else np.array([])
        return float(max(np.abs(slopes).max(initial=0.0), abs(self.left_slope), abs(self.right_slope)))


@dataclass
class DualReport:
    """Best value seen (an upper bound on the lattice primal) and the multipliers attaining it"""

    value: float
    optimizer: MultiplierMatrix
    iterations: int
    status: DualStatus
    grad_norms: List[float] = field(default_factory=list)
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_value: float = float('nan')
    target: Optional[float] = None
    certificate_residual: Optional[float] = None
    lambdas: List[PiecewiseLinear] = field(default_factory=list)
    lower_bound: Optional[float] = None
    level_gap: Optional[float] = None

    @property
    def converged(self) -> bool:
        return self.status == DualStatus.CONVERGED

    def to_dict(self, trace: bool = False):
        doc = {
            'value': self.value,
            'optimizer': self.optimizer.to_dict(),
            'iterations': self.iterations,
            'status': self.status.value,
            'initial_value': self.initial_value,
            'target': self.target,
            'lower_bound': self.lower_bound,
            'level_gap': self.level_gap,
            'certificate_residual': self.certificate_residual,
            'final_grad_norm': self.grad_norms[-1] if self.grad_norms else None,
        }
        if trace:
            doc['history'] = self.history
        return doc


class _Oracle:
    """F and a subgradient at a multiplier vector"""

    def __init__(self, market: MarketData, lattice: LatticeSpec, payoff: PayoffSpec):
        self.market = market
        self.lattice = lattice
        self.payoff = payoff
        self.m, self.n = market.m, market.n
        self.calls = market.calls.reshape(-1)
        self.V = market.power[1] if market.power is not None else 0.0
        self.calls_made = 0

    def __call__(self, vec: np.ndarray):
        mult = MultiplierMatrix.from_vector(vec, self.m, self.n)
        value, _, stats = solve_inner(InnerProblem(self.lattice, self.payoff, mult, self.market))
        self.calls_made += 1
        F = value + float(mult.alpha.reshape(-1) @ self.calls) + mult.beta * self.V
        grad = np.zeros_like(vec)
        grad[:-1] = self.calls - stats.call_expectations.reshape(-1)
        if self.market.power is not None:
            grad[-1] = self.V - stats.power_expectation
        return F, grad


def coordinate_scale(market: MarketData, lattice: LatticeSpec, payoff: PayoffSpec) -> np.ndarray:
    """
    Largest stopped value of each hedge feature on the lattice.

    The matching subgradient coordinate C - E[feature] is bounded by it, so
    dividing by the scale puts the call and power coordinates on one footing.
    """
    graph = state_graph(lattice, payoff)
    feats = graph.call_features(market.strikes)
    scale = np.ones(market.m * market.n + 1)
    for i in range(1, market.m + 1):
        nodes = graph.stage_nodes(i)
        scale[(i - 1) * market.n:i * market.n] = feats[nodes].max(axis=0)
    if market.power is not None:
        last = graph.stage_nodes(market.m)
        scale[-1] = graph.power_features(market.power[0])[last].max()
    return np.where(scale > 0.0, scale, 1.0)


def project_to_level(y: np.ndarray, cuts: Sequence[Cut], level: float):
    """
    Nearest point to y at which every affine minorant a.z + c is at most level.

    Returns (point, weights) with the multipliers of the cuts, or None when no
    point satisfies all of them.
    """
    A = np.array([a for a, _ in cuts])
    b = level - np.array([c for _, c in cuts])
    slack = 1e-10 * (1.0 + np.abs(b))
    r = A @ y - b
    if np.all(r <= slack):
        return y.copy(), np.zeros(len(cuts))
    for size in range(1, len(cuts) + 1):
        for active in combinations(range(len(cuts)), size):
            idx = list(active)
            gram = A[idx] @ A[idx].T
            lam = np.linalg.lstsq(gram, r[idx], rcond=None)[0]
            if np.any(lam < 0.0) or not np.allclose(gram @ lam, r[idx], rtol=1e-9, atol=1e-12):
                continue
            z = y - lam @ A[idx]
            if np.all(A @ z - b <= slack):
                weights = np.zeros(len(cuts))
                weights[idx] = lam
                return z, weights
    return None


def solve_dual(market: MarketData, lattice: LatticeSpec, payoff: PayoffSpec,
               opts: Optional[DualOptions] = None) -> DualReport:
    """
    Minimize F by level projections in coordinates rescaled by coordinate_scale.

    Each step moves to the nearest point where both the newest cut and the
    aggregate of the earlier ones reach the level. The level is opts.target when
    given (for instance the LP value). Without one it sits delta below the record
    value; delta halves, and the iterate restarts from the best point, whenever the
    path since the last record travels further than the path radius. If no point
    reaches the level, the level is a lower bound on the optimum.

    Converged when the target is met within opts.tol, when a lower bound closes
    the gap to opts.gap_tol, or when the best value improves by less than opts.tol
    over opts.window iterations while the remaining gap (to the target, else delta)
    is within opts.gap_tol.
    """
    opts = opts or DualOptions()
    if not opts.use_power and market.power is not None:
        market = market.without_power()
    if opts.check_arbitrage:
        verdict = arbitrage_check(market)
        if not verdict.ok:
            raise ArbitrageError(f"market data outside the open no-arbitrage set: {', '.join(sorted(set(verdict.tags())))}",
                                 verdict)

    oracle = _Oracle(market, lattice, payoff)
    scale = coordinate_scale(market, lattice, payoff)

    def evaluate(y):
        F, g = oracle(y / scale)
        return F, g / scale

    vec = np.zeros(market.m * market.n + 1)
    if opts.initial is not None:
        vec = opts.initial.to_vector().astype(float)
    if market.power is None:
        vec[-1] = 0.0

    y = scale * vec
    F, g = evaluate(y)
    best, best_y, best_g = F, y.copy(), g.copy()
    initial_value = F
    target = opts.target
    delta = 0.1 * (1.0 + abs(F))
    record = F
    radius = float(np.sqrt(y.size)) * (1.0 + abs(F))
    travelled = 0.0
    lower = -np.inf
    aggregate: Optional[Cut] = None
    best_trail = [best]
    grad_norms = []
    history = []
    status = DualStatus.NOT_CONVERGED

    iterations = 0
    for k in range(1, opts.max_iters + 1):
        iterations = k
        gnorm = float(np.linalg.norm(g))
        grad_norms.append(gnorm)
        if gnorm <= 1e-15:
            status = DualStatus.CONVERGED
            break
        if target is not None and best - target <= opts.tol * (1.0 + abs(target)):
            status = DualStatus.CONVERGED
            break

        if target is None and best <= record - 0.5 * delta:
            record, travelled = best, 0.0
        level = target if target is not None else record - delta

        cuts = [(g, F - float(g @ y))] + ([aggregate] if aggregate is not None else [])
        projected = project_to_level(y, cuts, level)
        step = 0.0
        if projected is None:
            # no multiplier reaches the level, so the level is below the optimum
            lower = max(lower, level)
            if target is not None:
                logger.warning(f"solve_dual: target {target:.10g} is below the dual optimum, switching to level control")
                target = None
            delta = 0.5 * (best - lower)
            record, travelled = best, 0.0
            y, F, g = best_y.copy(), best, best_g
        else:
            z, weights = projected
            total = float(weights.sum())
            if total > 0.0:
                normal = sum(w * a for w, (a, _) in zip(weights, cuts)) / total
                offset = sum(w * c for w, (_, c) in zip(weights, cuts)) / total
                aggregate = (normal, float(offset))
            step = float(np.linalg.norm(z - y))
            travelled += step
            y = z
            F, g = evaluate(y)
            if F < best:
                best, best_y, best_g = F, y.copy(), g.copy()
            if target is None and travelled > radius:
                delta *= 0.5
                record, travelled = best, 0.0
                y, F, g = best_y.copy(), best, best_g
        best_trail.append(best)

        if opts.trace:
            history.append({'iter': k, 'value': F, 'best': best, 'grad_norm': gnorm, 'step': step, 'level': level})
        if best - lower <= opts.gap_tol * (1.0 + abs(best)):
            status = DualStatus.CONVERGED
            break
        if k >= opts.window and best_trail[-opts.window - 1] - best < opts.tol:
            remaining = best - target if target is not None else delta
            if remaining <= opts.gap_tol * (1.0 + abs(best)):
                status = DualStatus.CONVERGED
                break

    if status != DualStatus.CONVERGED and target is not None and best - target <= opts.gap_tol * (1.0 + abs(best)):
        status = DualStatus.CONVERGED
    optimizer = MultiplierMatrix.from_vector(best_y / scale, market.m, market.n)
    logger.info(f"solve_dual: value {best:.10g} after {iterations} iterations ({status.value}), "
                f"{oracle.calls_made} inner solves, level gap {delta:.3e}")
    return DualReport(
        value=best,
        optimizer=optimizer,
        iterations=iterations,
        status=status,
        grad_norms=grad_norms,
        history=history,
        initial_value=initial_value,
        target=opts.target,
        lower_bound=float(lower) if np.isfinite(lower) else None,
        level_gap=None if target is not None else delta,
    )


def solve_dual_measure(mus: Sequence[DiscreteMeasure], knot_grid, lattice: LatticeSpec,
                       payoff: PayoffSpec, opts: Optional[DualOptions] = None) -> DualReport:
    """
    Knot-restricted dual of the marginal problem.

    Each lambda_i is piecewise linear on the knots, i.e. a call portfolio on the
    knots priced under mu_i; the level and slope terms integrate to the same value
    under every centered law and drop out.
    """
    verdict = peacock_check(list(mus))
    if not verdict.ok or not verdict.centered:
        raise ArbitrageError("target marginals are not a centered peacock", verdict)

    knots = np.asarray(knot_grid, dtype=float)
    calls = np.vstack([call_price(mu, knots) for mu in mus])
    market = MarketData(knots, calls)
    opts = opts or DualOptions()
    opts = DualOptions(**{**opts.__dict__, 'check_arbitrage': False, 'use_power': False})
    report = solve_dual(market, lattice, payoff, opts)
    report.lambdas = [PiecewiseLinear.from_calls(knots, row) for row in report.optimizer.alpha]
    return report


@dataclass
class CertificateReport:
    certificate: DualCertificate
    static_value: float
    reconciled_value: float
    reconciliation_error: float

    @property
    def min_residual(self) -> float:
        return self.certificate.min_residual

    @property
    def ok(self) -> bool:
        return self.certificate.ok

    def to_dict(self) -> Dict[str, Any]:
        doc = self.certificate.to_dict()
        doc.update({
            'static_value': self.static_value,
            'reconciled_value': self.reconciled_value,
            'reconciliation_error': self.reconciliation_error,
            'min_residual': self.min_residual,
        })
        return doc


def verify_certificate(report: DualReport, market: MarketData, lattice: LatticeSpec,
                       payoff: PayoffSpec) -> CertificateReport:
    """Superhedge residuals at the reported multipliers and the S0 + alpha.C reconciliation"""
    mult = report.optimizer
    if market.power is None and mult.beta != 0.0:
        raise ValueError("report carries a power multiplier but the market has no power constraint")
    problem = InnerProblem(lattice, payoff, mult, market)
    _, _, stats = solve_inner(problem)
    cert = extract_certificate(problem, stats.table)

    static = float(np.sum(mult.alpha * market.calls))
    if market.power is not None:
        static += mult.beta * market.power[1]
    reconciled = cert.s0 + static
    report.certificate_residual = cert.min_residual
    return CertificateReport(cert, static, reconciled, abs(reconciled - report.value))
