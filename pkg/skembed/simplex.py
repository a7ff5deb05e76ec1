"""
Dense two-phase tableau simplex for  max c.x  s.t.  A x = b, x >= 0
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from config import Config
from skembed.errors import NotConvergedError, NumericBreakdownError

logger = logging.getLogger(__name__)

RATIO_EPS = 1e-12
RHS_CLAMP = 1e-9


class LPStatus(str, Enum):
    OPTIMAL = 'OPTIMAL'
    INFEASIBLE = 'INFEASIBLE'
    UNBOUNDED = 'UNBOUNDED'


@dataclass
class LPSolution:
    """OPTIMAL solutions carry primal masses, row prices and the two feasibility residuals"""

    status: LPStatus
    value: float = float('nan')
    x: Optional[np.ndarray] = None
    duals: Optional[np.ndarray] = None
    iterations: int = 0
    phase_one_value: float = 0.0
    primal_residual: float = float('nan')
    slackness: float = float('nan')
    dual_infeasibility: float = float('nan')
    redundant_rows: List[int] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == LPStatus.OPTIMAL

    def to_dict(self):
        return {
            'status': self.status.value,
            'value': None if not self.optimal else self.value,
            'iterations': self.iterations,
            'phase_one_value': self.phase_one_value,
            'primal_residual': None if not self.optimal else self.primal_residual,
            'slackness': None if not self.optimal else self.slackness,
            'redundant_rows': self.redundant_rows,
        }


class _Tableau:
    """Rows 0..r-1 are constraints, row r holds reduced costs; last column is the rhs"""

    def __init__(self, A, b, pivot_tol, rule, max_pivots):
        r, n = A.shape
        self.T = np.zeros((r + 1, n + r + 1))
        self.T[:r, :n] = A
        self.T[:r, n:n + r] = np.eye(r)
        self.T[:r, -1] = b
        self.basis = np.arange(n, n + r)
        self.rows = np.arange(r)
        self.n = n
        self.pivot_tol = pivot_tol
        self.rule = rule
        self.max_pivots = max_pivots
        self.pivots = 0

    def set_costs(self, cost):
        """Minimization costs over the current columns; rebuilds the reduced-cost row"""
        r = self.T.shape[0] - 1
        body = self.T[:r]
        self.T[r, :-1] = cost - cost[self.basis] @ body[:, :-1]
        self.T[r, -1] = -cost[self.basis] @ body[:, -1]

    def pivot(self, i, j):
        p = self.T[i, j]
        if abs(p) < self.pivot_tol:
            raise NumericBreakdownError(int(self.rows[i]), int(j), float(p))
        self.T[i] /= p
        col = self.T[:, j].copy()
        col[i] = 0.0
        self.T -= np.outer(col, self.T[i])
        self.basis[i] = j
        self.pivots += 1
        if self.pivots > self.max_pivots:
            raise NotConvergedError(f"simplex exceeded {self.max_pivots} pivots")

    def run(self, allowed, opt_tol):
        """
        Pivot until no allowed column has a negative reduced cost; returns False when unbounded.

        The ratio test only considers entries above pivot_tol. A column whose
        positive entries all sit below it is passed over until the next pivot.
        """
        rule = self.rule
        degenerate = 0
        r = self.T.shape[0] - 1
        skipped = np.zeros(self.T.shape[1] - 1, dtype=bool)
        while True:
            d = self.T[r, :-1]
            candidates = np.flatnonzero(allowed & ~skipped & (d < -opt_tol))
            if candidates.size == 0:
                if skipped.any():
                    logger.debug(f"simplex: stopping with {int(skipped.sum())} column(s) below the pivot tolerance")
                return True
            if rule == 'dantzig':
                j = int(candidates[np.argmin(d[candidates])])
            else:
                j = int(candidates[0])

            col = self.T[:r, j]
            if not np.any(col > RATIO_EPS):
                return False
            rows = np.flatnonzero(col > self.pivot_tol)
            if rows.size == 0:
                skipped[j] = True
                continue
            ratios = self.T[rows, -1] / col[rows]
            best = ratios.min()
            tied = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
            # Bland: among tied rows leave the smallest basic index
            i = int(tied[np.argmin(self.basis[tied])])

            if best <= 1e-14:
                degenerate += 1
                if rule == 'dantzig' and degenerate > 50:
                    logger.debug("simplex: degenerate streak, switching to Bland's rule")
                    rule = 'bland'
            else:
                degenerate = 0
            self.pivot(i, j)
            skipped[:] = False
            # rows left out of the ratio test may dip below zero by round-off
            rhs = self.T[:r, -1]
            rhs[(rhs < 0.0) & (rhs > -RHS_CLAMP)] = 0.0

    def drop_row(self, i):
        self.T = np.delete(self.T, i, axis=0)
        self.basis = np.delete(self.basis, i)
        self.rows = np.delete(self.rows, i)


def solve_standard_form(c, A, b, rule: str = Config.LP_PIVOT_RULE,
                        feasibility_tol: float = Config.LP_FEASIBILITY_TOL,
                        pivot_tol: float = Config.LP_PIVOT_TOL,
                        max_pivots: int = Config.LP_MAX_PIVOTS) -> LPSolution:
    """
    Phase I minimizes the sum of artificials; a positive optimum certifies
    infeasibility. Artificials left in the basis at zero are pivoted out, or their
    row is dropped as redundant. Phase II maximizes c.x from that basis.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    A = np.array(A, dtype=float, ndmin=2)
    b = np.asarray(b, dtype=float).reshape(-1)
    r, n = A.shape
    if c.size != n or b.size != r:
        raise ValueError("dimension mismatch between c, A and b")
    if rule not in ('bland', 'dantzig'):
        raise ValueError(f"unknown pivot rule {rule}")

    sign = np.where(b < 0, -1.0, 1.0)
    A_std = A * sign[:, None]
    b_std = b * sign

    tab = _Tableau(A_std, b_std, pivot_tol, rule, max_pivots)
    opt_tol = 1e-10

    phase_one = np.concatenate([np.zeros(n), np.ones(r)])
    tab.set_costs(phase_one)
    allowed = np.ones(n + r, dtype=bool)
    tab.run(allowed, opt_tol)
    infeasibility = -tab.T[-1, -1]
    scale = max(1.0, float(np.abs(b_std).max(initial=0.0)))
    if infeasibility > feasibility_tol * scale:
        logger.info(f"simplex: infeasible, phase I optimum {infeasibility:.3e}")
        return LPSolution(LPStatus.INFEASIBLE, iterations=tab.pivots, phase_one_value=float(infeasibility))

    # drive artificials out of the basis
    redundant = []
    i = 0
    while i < tab.T.shape[0] - 1:
        if tab.basis[i] >= n:
            row = tab.T[i, :n]
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > pivot_tol:
                tab.pivot(i, j)
            else:
                redundant.append(int(tab.rows[i]))
                tab.drop_row(i)
                continue
        i += 1

    tab.T = np.delete(tab.T, np.s_[n:n + r], axis=1)
    tab.set_costs(-c)
    if not tab.run(np.ones(n, dtype=bool), opt_tol):
        return LPSolution(LPStatus.UNBOUNDED, iterations=tab.pivots, phase_one_value=float(infeasibility),
                          redundant_rows=redundant)

    x = np.zeros(n)
    x[tab.basis] = tab.T[:-1, -1]
    x = np.where(np.abs(x) < 1e-15, 0.0, x)

    kept = tab.rows
    y_std = np.zeros(r)
    if kept.size:
        B = A_std[np.ix_(kept, tab.basis)]
        y_std[kept] = np.linalg.lstsq(B.T, c[tab.basis], rcond=None)[0]
    duals = y_std * sign

    reduced = c - A.T @ duals
    solution = LPSolution(
        status=LPStatus.OPTIMAL,
        value=float(c @ x),
        x=x,
        duals=duals,
        iterations=tab.pivots,
        phase_one_value=float(infeasibility),
        primal_residual=float(np.abs(A @ x - b).max(initial=0.0)),
        slackness=float(np.abs(x * reduced).max(initial=0.0)),
        dual_infeasibility=float(max(reduced.max(initial=0.0), 0.0)),
        redundant_rows=redundant,
    )
    logger.debug(f"simplex: optimal value {solution.value:.10g} after {tab.pivots} pivots")
    return solution
