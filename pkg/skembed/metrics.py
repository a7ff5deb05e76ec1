"""
Distances between discrete measures and the explicit bound certificates built on them
"""
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from skembed.errors import SupportError
from skembed.measures import DiscreteMeasure, call_price, cdf

SLACK = 1e-12


@dataclass(frozen=True)
class MetricReport:
    rho: float
    w1: float
    calls_sup_gap: float
    window: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BoundCertificate:
    """holds is true exactly when rho <= rho_bound and w1 <= w_bound"""

    epsilon: float
    rho_bound: float
    w_bound: float
    holds: bool
    rho: float
    w1: float

    def to_dict(self):
        return asdict(self)


def _levy_feasible(mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float) -> bool:
    """
    F_mu(x - eps) - eps <= F_nu(x) <= F_mu(x + eps) + eps for every x.

    Both sides are right-continuous step functions, so it is enough to look at the
    points where either side jumps.
    """
    cum_mu = np.cumsum(mu.masses)

    # lower side jumps at mu atoms + eps (exact left value) and at nu atoms
    lower_mu = cum_mu - eps - cdf(nu, mu.positions + eps)
    lower_nu = cdf(mu, nu.positions - eps) - eps - np.cumsum(nu.masses)
    if lower_mu.max() > SLACK or lower_nu.max() > SLACK:
        return False

    # upper side jumps at nu atoms and at mu atoms - eps
    upper_nu = np.cumsum(nu.masses) - cdf(mu, nu.positions + eps) - eps
    upper_mu = cdf(nu, mu.positions - eps) - cum_mu - eps
    return upper_nu.max() <= SLACK and upper_mu.max() <= SLACK


def levy_prokhorov(mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float = 1e-12) -> float:
    """Smallest eps satisfying the CDF band condition, by bisection on [0, 1]"""
    if _levy_feasible(mu, nu, 0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _levy_feasible(mu, nu, mid):
            hi = mid
        else:
            lo = mid
    return hi


def wasserstein1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Integral of |F_mu - F_nu| over the line"""
    breaks = np.union1d(mu.positions, nu.positions)
    if breaks.size < 2:
        return 0.0
    gaps = np.abs(cdf(mu, breaks[:-1]) - cdf(nu, breaks[:-1]))
    return float(np.dot(gaps, np.diff(breaks)))


def calls_sup_gap(mu: DiscreteMeasure, nu: DiscreteMeasure, R: float) -> float:
    """sup over K in [-R, R] of |c_mu(K) - c_nu(K)|; attained at a kink or an end of the window"""
    if not R > 0:
        raise ValueError("R must be > 0")
    kinks = np.union1d(mu.positions, nu.positions)
    candidates = np.union1d(kinks[np.abs(kinks) <= R], [-R, R])
    return float(np.max(np.abs(call_price(mu, candidates) - call_price(nu, candidates))))


def metric_report(mu: DiscreteMeasure, nu: DiscreteMeasure, R: Optional[float] = None) -> MetricReport:
    if R is None:
        R = max(float(np.abs(mu.positions).max()), float(np.abs(nu.positions).max()), 1.0)
    return MetricReport(
        rho=levy_prokhorov(mu, nu),
        w1=wasserstein1(mu, nu),
        calls_sup_gap=calls_sup_gap(mu, nu, R),
        window=float(R),
    )


def rate_certificate(mu: DiscreteMeasure, nu: DiscreteMeasure, R: float) -> BoundCertificate:
    """Check rho <= sqrt(2 eps) and W <= 4 R sqrt(eps) for measures living on [-R, R]"""
    for name, m in (('mu', mu), ('nu', nu)):
        if not m.support_within(R, SLACK):
            raise SupportError(f"{name} has atoms outside [-{R}, {R}]")

    eps = calls_sup_gap(mu, nu, R)
    rho = levy_prokhorov(mu, nu)
    w1 = wasserstein1(mu, nu)
    rho_bound = math.sqrt(2.0 * eps)
    w_bound = 4.0 * R * math.sqrt(eps)
    return BoundCertificate(
        epsilon=eps,
        rho_bound=rho_bound,
        w_bound=w_bound,
        holds=rho <= rho_bound + SLACK and w1 <= w_bound + SLACK,
        rho=rho,
        w1=w1,
    )


def marginal_gap_bound(grid_stats: Tuple[float, float], p: float, V: float) -> Tuple[float, float]:
    """
    Explicit (rho_bound, w_bound) for a grid with bound |K| and mesh dK.

    eps = dK + 4V |K|^(-p/q); rho_bound = sqrt(2 eps) + 2V |K|^(-p);
    w_bound = 4|K| sqrt(eps) + 2V |K|^(-p/q).
    """
    bound_K, mesh_K = (float(v) for v in grid_stats)
    if not bound_K > 0 or not mesh_K > 0:
        raise ValueError("grid bound and mesh must be > 0")
    if not p > 1:
        raise ValueError("p must be > 1")
    q = p / (p - 1.0)
    eps = mesh_K + 4.0 * V * bound_K ** (-p / q)
    rho_bound = math.sqrt(2.0 * eps) + 2.0 * V * bound_K ** (-p)
    w_bound = 4.0 * bound_K * math.sqrt(eps) + 2.0 * V * bound_K ** (-p / q)
    return rho_bound, w_bound


def second_moment_gap_bound(w: float, p: float, V: float) -> float:
    """|mu(x^2) - nu(x^2)| <= 2RW + 2V/R^(p-2) evaluated at R = W^(-1/(p-1))"""
    if not p > 2:
        raise ValueError("p must be > 2")
    if w <= 0:
        return 0.0
    return (2.0 + 2.0 * V) * w ** ((p - 2.0) / (p - 1.0))


def one_marginal_stability_bound(rho: float, lipschitz: float, sup_norm: float, p: float, V: float) -> float:
    """L rho^r + 2|Phi| rho^(1-r) + 4|Phi| V^(1/p) rho^(1/q - r) at r = 1/(2q)"""
    if rho <= 0:
        return 0.0
    q = p / (p - 1.0)
    r = 1.0 / (2.0 * q)
    return (lipschitz * rho ** r
            + 2.0 * sup_norm * rho ** (1.0 - r)
            + 4.0 * sup_norm * V ** (1.0 / p) * rho ** (1.0 / q - r))


def multi_marginal_stability_bound(ws: Sequence[float], lipschitz: float, sup_norm: float,
                                   p: float, V: float) -> float:
    """(1+L)(1+|Phi|) sum W_i + L sum of the second-moment gaps"""
    ws = [float(w) for w in ws]
    return ((1.0 + lipschitz) * (1.0 + sup_norm) * sum(ws)
            + lipschitz * sum(second_moment_gap_bound(w, p, V) for w in ws))
