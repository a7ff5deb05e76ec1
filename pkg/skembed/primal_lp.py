"""
Exact lattice primal: a linear program over randomized multiple-stopping measures.

Variables are the stopped and continued masses at every decision state. Flow
rows conserve mass through the state graph; CALLS mode adds one row per
(maturity, strike) call price plus an optional power row, MARGINALS mode one
row per (stage, level) of the target laws.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import Config
from skembed.errors import ArbitrageError, BudgetExceededError, QuantizationError
from skembed.lattice import LatticeSpec, PayoffSpec, SupportSet, quantize
from skembed.measures import DiscreteMeasure, MarketData, arbitrage_check, peacock_check
from skembed.simplex import LPSolution, LPStatus, solve_standard_form
from skembed.stopping_dp import (
    MultiplierMatrix,
    StateGraph,
    StoppingPolicy,
    forward_support,
    stage_marginals,
    state_graph,
)

logger = logging.getLogger(__name__)


class ModeKind(str, Enum):
    CALLS = 'CALLS'
    MARGINALS = 'MARGINALS'


@dataclass(frozen=True)
class ConstraintMode:
    kind: ModeKind
    market: Optional[MarketData] = None
    marginals: Optional[Sequence[DiscreteMeasure]] = None

    @classmethod
    def calls(cls, market: MarketData) -> 'ConstraintMode':
        return cls(ModeKind.CALLS, market=market)

    @classmethod
    def of_marginals(cls, mus: Sequence[DiscreteMeasure]) -> 'ConstraintMode':
        return cls(ModeKind.MARGINALS, marginals=tuple(mus))

    @property
    def stages(self) -> int:
        return self.market.m if self.kind == ModeKind.CALLS else len(self.marginals)


@dataclass
class LPInstance:
    """Standard form max c.x, A x = b, x >= 0 with column and row metadata"""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    col_node: np.ndarray
    col_stop: np.ndarray
    row_labels: List[str]
    graph: StateGraph
    mode: ConstraintMode
    quantized: Optional[List[DiscreteMeasure]] = None

    @property
    def shape(self):
        return self.A.shape

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.A))

    def rows_tagged(self, prefix: str) -> np.ndarray:
        return np.array([i for i, label in enumerate(self.row_labels) if label.startswith(prefix)], dtype=int)


def build_lp(mode: ConstraintMode, lattice: LatticeSpec, payoff: PayoffSpec) -> LPInstance:
    if mode.stages != lattice.stages:
        raise ValueError(f"constraints describe {mode.stages} stage(s), lattice has {lattice.stages}")
    graph = state_graph(lattice, payoff)
    m, N = lattice.stages, lattice.steps

    decision = graph.decision_nodes()
    columns_node, columns_stop = [], []
    stop_col = np.full(graph.size, -1, dtype=np.int64)
    cont_col = np.full(graph.size, -1, dtype=np.int64)
    for idx in decision:
        stop_col[idx] = len(columns_node)
        columns_node.append(idx)
        columns_stop.append(True)
        if graph.time_arr[idx] < N:
            cont_col[idx] = len(columns_node)
            columns_node.append(idx)
            columns_stop.append(False)
    ncols = len(columns_node)

    flow_row = np.full(graph.size, -1, dtype=np.int64)
    flow_row[decision] = np.arange(decision.size)
    rows: List[np.ndarray] = []
    labels: List[str] = []
    rhs: List[float] = []

    flow = np.zeros((decision.size, ncols))
    for r, idx in enumerate(decision):
        flow[r, stop_col[idx]] += 1.0
        if cont_col[idx] >= 0:
            flow[r, cont_col[idx]] += 1.0
            for child in (graph.up[idx], graph.down[idx]):
                flow[flow_row[child], cont_col[idx]] -= 0.5
        child = graph.stop[idx]
        if flow_row[child] >= 0:
            flow[flow_row[child], stop_col[idx]] -= 1.0
    rows.append(flow)
    for idx in decision:
        labels.append(f"flow[{graph.stage[idx]},{graph.time[idx]},{graph.level[idx]},{graph.aux[idx]}]")
        rhs.append(1.0 if idx == graph.root else 0.0)

    stage_stops = {i: [(idx, stop_col[idx]) for idx in graph.stage_nodes(i)] for i in range(1, m + 1)}
    quantized = None

    if mode.kind == ModeKind.CALLS:
        market = mode.market
        feats = graph.call_features(market.strikes)
        for i in range(1, m + 1):
            block = np.zeros((market.n, ncols))
            for idx, col in stage_stops[i]:
                block[:, col] = feats[idx]
            rows.append(block)
            for j in range(market.n):
                labels.append(f"call[{i},{j}]")
                rhs.append(float(market.calls[i - 1, j]))
        if market.power is not None:
            p, V = market.power
            powers = graph.power_features(p)
            row = np.zeros((1, ncols))
            for idx, col in stage_stops[m]:
                row[0, col] = powers[idx]
            rows.append(row)
            labels.append('power')
            rhs.append(V)
    else:
        quantized = [quantize(mu, lattice) for mu in mode.marginals]
        verdict = peacock_check(quantized)
        if not verdict.ok:
            raise ArbitrageError("target marginals are not in convex order", verdict)
        for i in range(1, m + 1):
            levels = sorted({int(graph.level[idx]) for idx, _ in stage_stops[i]})
            target = {int(round(x / lattice.dx)): w for x, w in quantized[i - 1].atoms}
            missing = sorted(set(target) - set(levels))
            if missing:
                raise QuantizationError(f"stage {i} target puts mass on unreachable levels {missing}")
            block = np.zeros((len(levels), ncols))
            where = {k: r for r, k in enumerate(levels)}
            for idx, col in stage_stops[i]:
                block[where[int(graph.level[idx])], col] = 1.0
            rows.append(block)
            for k in levels:
                labels.append(f"marginal[{i},{k}]")
                rhs.append(float(target.get(k, 0.0)))

    mass = np.zeros((1, ncols))
    for idx, col in stage_stops[m]:
        mass[0, col] = 1.0
    rows.append(mass)
    labels.append('mass')
    rhs.append(1.0)

    c = np.zeros(ncols)
    for idx, col in stage_stops[m]:
        c[col] = graph.phi[graph.stop[idx]]

    instance = LPInstance(
        c=c,
        A=np.vstack(rows),
        b=np.asarray(rhs),
        col_node=np.asarray(columns_node, dtype=np.int64),
        col_stop=np.asarray(columns_stop, dtype=bool),
        row_labels=labels,
        graph=graph,
        mode=mode,
        quantized=quantized,
    )
    logger.debug(f"build_lp: {instance.shape[0]} rows x {instance.shape[1]} columns, {instance.nonzeros} nonzeros")
    return instance


def simplex_solve(instance: LPInstance, nonzero_cap: int = Config.LP_NONZERO_CAP,
                  rule: str = Config.LP_PIVOT_RULE,
                  feasibility_tol: float = Config.LP_FEASIBILITY_TOL) -> LPSolution:
    nnz = instance.nonzeros
    if nnz > nonzero_cap:
        raise BudgetExceededError('LP nonzeros', nnz, nonzero_cap)
    return solve_standard_form(instance.c, instance.A, instance.b, rule=rule, feasibility_tol=feasibility_tol)


def policy_from_solution(instance: LPInstance, solution: LPSolution) -> StoppingPolicy:
    """Stop probability = stopped / (stopped + continued) mass; unreached states stop"""
    graph = instance.graph
    stopped = np.zeros(graph.size)
    continued = np.zeros(graph.size)
    x = np.clip(solution.x, 0.0, None)
    np.add.at(stopped, instance.col_node[instance.col_stop], x[instance.col_stop])
    np.add.at(continued, instance.col_node[~instance.col_stop], x[~instance.col_stop])
    total = stopped + continued
    prob = np.ones(graph.size)
    reached = total > 1e-14
    prob[reached] = stopped[reached] / total[reached]
    return StoppingPolicy(graph, prob, {'source': 'lp', 'unreached': 'STOP'})


def stop_masses(instance: LPInstance, solution: LPSolution) -> np.ndarray:
    masses = np.zeros(instance.graph.size)
    sel = instance.col_stop
    np.add.at(masses, instance.col_node[sel], np.clip(solution.x[sel], 0.0, None))
    return masses


def hedge_from_lp(instance: LPInstance, solution: LPSolution) -> Optional[MultiplierMatrix]:
    """Row prices of the call rows (and the power row) as static-hedge multipliers"""
    if instance.mode.kind != ModeKind.CALLS or not solution.optimal:
        return None
    market = instance.mode.market
    call_rows = instance.rows_tagged('call[')
    alpha = solution.duals[call_rows].reshape(market.m, market.n)
    power_rows = instance.rows_tagged('power')
    beta = float(solution.duals[power_rows[0]]) if power_rows.size else 0.0
    return MultiplierMatrix(alpha, beta)


@dataclass
class SolveReport:
    """Outcome of a lattice primal solve"""

    status: LPStatus
    value: float
    mode: str
    lp: LPSolution
    rows: int
    columns: int
    nonzeros: int
    marginals: List[DiscreteMeasure] = field(default_factory=list)
    policy: Optional[StoppingPolicy] = None
    support: Optional[SupportSet] = None
    stopping_measure: List[Dict[str, Any]] = field(default_factory=list)
    hedge: Optional[MultiplierMatrix] = None
    near_boundary: bool = False
    constraint_residual: float = float('nan')

    @property
    def optimal(self) -> bool:
        return self.status == LPStatus.OPTIMAL

    def to_dict(self):
        return {
            'status': self.status.value,
            'value': self.value if self.optimal else None,
            'mode': self.mode,
            'lp': self.lp.to_dict(),
            'rows': self.rows,
            'columns': self.columns,
            'nonzeros': self.nonzeros,
            'marginals': [{'atoms': [[x, w] for x, w in mu.atoms]} for mu in self.marginals],
            'stopping_measure': self.stopping_measure,
            'hedge': None if self.hedge is None else self.hedge.to_dict(),
            'near_boundary': self.near_boundary,
            'constraint_residual': None if not self.optimal else self.constraint_residual,
        }


def solve_primal(mode: ConstraintMode, lattice: LatticeSpec, payoff: PayoffSpec,
                 nonzero_cap: int = Config.LP_NONZERO_CAP, rule: str = Config.LP_PIVOT_RULE,
                 feasibility_tol: float = Config.LP_FEASIBILITY_TOL,
                 with_paths: Optional[bool] = None) -> SolveReport:
    """
    Build, solve and read back the optimal stopping measure.

    The support path set is extracted for single-stage problems by default;
    pass with_paths to force it on or off.
    """
    instance = build_lp(mode, lattice, payoff)
    solution = simplex_solve(instance, nonzero_cap=nonzero_cap, rule=rule, feasibility_tol=feasibility_tol)

    near_boundary = False
    if mode.kind == ModeKind.CALLS:
        verdict = arbitrage_check(mode.market)
        near_boundary = verdict.min_slack < Config.BOUNDARY_FLAG_SLACK

    report = SolveReport(
        status=solution.status,
        value=solution.value,
        mode=mode.kind.value,
        lp=solution,
        rows=instance.shape[0],
        columns=instance.shape[1],
        nonzeros=instance.nonzeros,
        near_boundary=near_boundary,
    )
    if not solution.optimal:
        logger.warning(f"solve_primal ({mode.kind.value}): {solution.status.value}")
        return report

    graph = instance.graph
    masses = stop_masses(instance, solution)
    report.marginals = stage_marginals(graph, masses)
    report.policy = policy_from_solution(instance, solution)
    report.hedge = hedge_from_lp(instance, solution)
    report.constraint_residual = solution.primal_residual
    report.stopping_measure = [
        {'stage': int(graph.stage[i]), 't': int(graph.time[i]), 'position': float(graph.x[i]),
         'memory': list(graph.aux[i]), 'mass': float(masses[i])}
        for i in np.flatnonzero(masses > 1e-12)
    ]
    if with_paths is None:
        with_paths = lattice.stages == 1
    if with_paths:
        report.support, _ = forward_support(report.policy, lattice)

    logger.info(f"solve_primal ({mode.kind.value}): value {report.value:.10g}, "
                f"{report.rows}x{report.columns} LP, {solution.iterations} pivots")
    return report
