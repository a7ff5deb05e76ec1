"""
Multiple optimal stopping on the lattice by backward induction.

States are (stage, time, level, memory) tuples. Stage i in 1..m means stages
1..i-1 have stopped; stage m+1 is the absorbing set where the reward is paid.
Stopping stage i moves to stage i+1 at the same time and level, so equal stop
times are allowed.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config
from skembed.errors import BudgetExceededError
from skembed.lattice import LatticeSpec, PayoffSpec, StoppedPath, SupportSet
from skembed.measures import DiscreteMeasure, MarketData

logger = logging.getLogger(__name__)


@dataclass
class MultiplierMatrix:
    """Static-hedge weights alpha (m x n) and the power multiplier beta"""

    alpha: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=float, ndmin=2)
        self.beta = float(self.beta)
        if not np.all(np.isfinite(self.alpha)) or not np.isfinite(self.beta):
            raise ValueError("multipliers must be finite")

    @classmethod
    def zeros(cls, m: int, n: int) -> 'MultiplierMatrix':
        return cls(np.zeros((m, n)), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.append(self.alpha.reshape(-1), self.beta)

    @classmethod
    def from_vector(cls, vector: np.ndarray, m: int, n: int) -> 'MultiplierMatrix':
        return cls(np.asarray(vector[:m * n]).reshape(m, n), float(vector[m * n]))

    def to_dict(self):
        return {'alpha': self.alpha.tolist(), 'beta': self.beta}


class StateGraph:
    """Reachable states of one lattice/payoff pair with successor indices"""

    def __init__(self, lattice: LatticeSpec, payoff: PayoffSpec, budget: int = Config.STATE_BUDGET):
        payoff.check_stages(lattice.stages)
        self.lattice = lattice
        self.payoff = payoff
        m, N = lattice.stages, lattice.steps

        self.stage: List[int] = []
        self.time: List[int] = []
        self.level: List[int] = []
        self.aux: List[tuple] = []
        self.index: Dict[tuple, int] = {}
        layers: Dict[Tuple[int, int], List[int]] = {}

        def node(stage, t, k, aux):
            key = (stage, t, k, aux)
            idx = self.index.get(key)
            if idx is None:
                idx = len(self.stage)
                if idx >= budget:
                    raise BudgetExceededError('states', idx + 1, budget)
                self.index[key] = idx
                self.stage.append(stage)
                self.time.append(t)
                self.level.append(k)
                self.aux.append(aux)
                layers.setdefault((t, stage), []).append(idx)
            return idx

        self.root = node(1, 0, 0, payoff.initial_aux())
        up, down, stop = {}, {}, {}
        for t in range(N + 1):
            for stage in range(1, m + 2):
                for idx in layers.get((t, stage), []):
                    if stage > m:
                        continue
                    k, aux = self.level[idx], self.aux[idx]
                    stop[idx] = node(stage + 1, t, k, payoff.on_stop(stage, aux, k))
                    if t < N:
                        up[idx] = node(stage, t + 1, k + 1, payoff.advance(aux, k + 1))
                        down[idx] = node(stage, t + 1, k - 1, payoff.advance(aux, k - 1))

        size = len(self.stage)
        self.size = size
        self.stage_arr = np.asarray(self.stage, dtype=np.int64)
        self.time_arr = np.asarray(self.time, dtype=np.int64)
        self.level_arr = np.asarray(self.level, dtype=np.int64)
        self.x = self.level_arr * lattice.dx
        self.up = np.full(size, -1, dtype=np.int64)
        self.down = np.full(size, -1, dtype=np.int64)
        self.stop = np.full(size, -1, dtype=np.int64)
        for table, target in ((up, self.up), (down, self.down), (stop, self.stop)):
            if table:
                keys = np.fromiter(table.keys(), dtype=np.int64)
                target[keys] = np.fromiter(table.values(), dtype=np.int64)

        self.terminal = self.stage_arr == m + 1
        self.phi = np.full(size, np.nan)
        for idx in np.flatnonzero(self.terminal):
            self.phi[idx] = payoff.terminal(self.time[idx], self.level[idx], self.aux[idx], lattice.dx)

        # forward order: time ascending, then stage ascending
        self.groups = [
            (t, stage, np.asarray(layers[(t, stage)], dtype=np.int64))
            for t in range(N + 1) for stage in range(1, m + 2) if (t, stage) in layers
        ]
        logger.debug(f"state graph: {size} states for N={N}, m={m}, {payoff.kind.value}")

    def stage_nodes(self, stage: int) -> np.ndarray:
        return np.flatnonzero(self.stage_arr == stage)

    def decision_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal)

    def find(self, stage: int, t: int, level: int, aux: Optional[tuple] = None) -> List[int]:
        if aux is not None:
            idx = self.index.get((stage, t, level, aux))
            return [] if idx is None else [idx]
        mask = (self.stage_arr == stage) & (self.time_arr == t) & (self.level_arr == level)
        return np.flatnonzero(mask).tolist()

    def call_features(self, strikes: np.ndarray) -> np.ndarray:
        return np.maximum(self.x[:, None] - np.asarray(strikes, dtype=float)[None, :], 0.0)

    def power_features(self, p: float) -> np.ndarray:
        return np.abs(self.x) ** p


@lru_cache(maxsize=64)
def state_graph(lattice: LatticeSpec, payoff: PayoffSpec) -> StateGraph:
    return StateGraph(lattice, payoff)


@dataclass
class InnerProblem:
    """sup over stopping rules of E[Phi - sum alpha_ij (B_Ti - K_j)+ - beta |B_Tm|^p]"""

    lattice: LatticeSpec
    payoff: PayoffSpec
    alpha: MultiplierMatrix
    market: MarketData

    def __post_init__(self):
        expected = (self.market.m, self.market.n)
        if self.alpha.alpha.shape != expected:
            raise ValueError(f"alpha has shape {self.alpha.alpha.shape}, market needs {expected}")
        if self.market.m != self.lattice.stages:
            raise ValueError("market maturities and lattice stages differ")

    @property
    def beta(self) -> float:
        return self.alpha.beta

    def stop_rewards(self, graph: StateGraph) -> np.ndarray:
        """Static leg paid when a stage stops at a node (negative of the hedge income)"""
        m = self.lattice.stages
        reward = np.zeros(graph.size)
        feats = graph.call_features(self.market.strikes)
        for i in range(1, m + 1):
            nodes = graph.stage_nodes(i)
            reward[nodes] = -feats[nodes] @ self.alpha.alpha[i - 1]
        if self.beta != 0.0:
            if self.market.power is None:
                raise ValueError("beta is set but the market has no power constraint")
            last = graph.stage_nodes(m)
            reward[last] -= self.beta * graph.power_features(self.market.power[0])[last]
        return reward


@dataclass
class ValueTable:
    """Value, stop value and continuation value per state; nan where an action does not exist"""

    graph: StateGraph
    value: np.ndarray
    stop_value: np.ndarray
    cont_value: np.ndarray

    @property
    def root_value(self) -> float:
        return float(self.value[self.graph.root])

    def perturbed(self, shift: float) -> 'ValueTable':
        """Copy with the root value shifted"""
        value = self.value.copy()
        value[self.graph.root] += shift
        return ValueTable(self.graph, value, self.stop_value.copy(), self.cont_value.copy())


@dataclass
class StoppingPolicy:
    """
    Stop probability per state; 1 means STOP, 0 means CONTINUE.

    Deterministic policies come from solve_inner; fractional values come from LP
    solutions. At the horizon the probability is always 1.
    """

    graph: StateGraph
    stop_prob: np.ndarray
    tie_rule: Dict[str, object] = field(default_factory=lambda: {'prefer': 'STOP', 'tol': Config.STOP_TIE_TOL})

    def action(self, idx: int) -> str:
        p = self.stop_prob[idx]
        if p >= 1.0:
            return 'STOP'
        if p <= 0.0:
            return 'CONTINUE'
        return 'RANDOMIZED'

    @property
    def deterministic(self) -> bool:
        probs = self.stop_prob[self.graph.decision_nodes()]
        return bool(np.all((probs == 0.0) | (probs == 1.0)))


@dataclass
class InnerStats:
    call_expectations: np.ndarray
    power_expectation: Optional[float]
    expected_payoff: float
    marginals: List[DiscreteMeasure]
    table: ValueTable
    states: int
    ties: int


@dataclass
class Propagation:
    node_mass: np.ndarray
    stop_mass: np.ndarray


def propagate(policy: StoppingPolicy) -> Propagation:
    """Push unit mass forward from the root, splitting at CONTINUE and depositing at STOP"""
    graph = policy.graph
    m, N = graph.lattice.stages, graph.lattice.steps
    mass = np.zeros(graph.size)
    stop_mass = np.zeros(graph.size)
    mass[graph.root] = 1.0
    for t, stage, idx in graph.groups:
        if stage > m:
            continue
        w = mass[idx]
        s = w * policy.stop_prob[idx]
        stop_mass[idx] = s
        np.add.at(mass, graph.stop[idx], s)
        if t < N:
            c = 0.5 * (w - s)
            np.add.at(mass, graph.up[idx], c)
            np.add.at(mass, graph.down[idx], c)
    return Propagation(mass, stop_mass)


def stage_marginals(graph: StateGraph, stop_mass: np.ndarray) -> List[DiscreteMeasure]:
    marginals = []
    for i in range(1, graph.lattice.stages + 1):
        nodes = graph.stage_nodes(i)
        weights = np.clip(stop_mass[nodes], 0.0, None)
        marginals.append(DiscreteMeasure.from_atoms(zip(graph.x[nodes], weights), normalize=True, drop_below=1e-15))
    return marginals


def policy_value(policy: StoppingPolicy, market: Optional[MarketData] = None) -> Dict[str, object]:
    """Expected reward, stopped marginals and (with a market) expected call payoffs of any policy"""
    graph = policy.graph
    flow = propagate(policy)
    terminal = np.flatnonzero(graph.terminal)
    result = {
        'expected_payoff': float(np.dot(flow.node_mass[terminal], graph.phi[terminal])),
        'marginals': stage_marginals(graph, flow.stop_mass),
        'flow': flow,
    }
    if market is not None:
        result['call_expectations'] = _call_expectations(graph, flow.stop_mass, market)
        if market.power is not None:
            last = graph.stage_nodes(graph.lattice.stages)
            result['power_expectation'] = float(np.dot(flow.stop_mass[last], graph.power_features(market.power[0])[last]))
    return result


def _call_expectations(graph: StateGraph, stop_mass: np.ndarray, market: MarketData) -> np.ndarray:
    feats = graph.call_features(market.strikes)
    out = np.zeros((graph.lattice.stages, market.n))
    for i in range(1, graph.lattice.stages + 1):
        nodes = graph.stage_nodes(i)
        out[i - 1] = stop_mass[nodes] @ feats[nodes]
    return out


def policy_objective(problem: InnerProblem, policy: StoppingPolicy) -> float:
    """Inner objective E[Phi] - alpha . E[(B_T - K)+] - beta E|B_Tm|^p of a given policy"""
    graph = policy.graph
    flow = propagate(policy)
    reward = problem.stop_rewards(graph)
    terminal = np.flatnonzero(graph.terminal)
    return float(np.dot(flow.node_mass[terminal], graph.phi[terminal]) + np.dot(flow.stop_mass, reward))


def solve_inner(problem: InnerProblem, tie_tol: float = Config.STOP_TIE_TOL):
    """
    Backward induction over the state graph.

    Returns (value, policy, stats); stats carries the expected call payoffs and
    power moment under the optimal policy (ties resolved to STOP), which are the
    subgradient coordinates of the outer dual.
    """
    graph = state_graph(problem.lattice, problem.payoff)
    m, N = problem.lattice.stages, problem.lattice.steps
    reward = problem.stop_rewards(graph)

    value = np.full(graph.size, np.nan)
    stop_value = np.full(graph.size, np.nan)
    cont_value = np.full(graph.size, np.nan)
    stop_prob = np.ones(graph.size)
    ties = 0

    for t, stage, idx in reversed(graph.groups):
        if stage > m:
            value[idx] = graph.phi[idx]
            continue
        sv = reward[idx] + value[graph.stop[idx]]
        stop_value[idx] = sv
        if t == N:
            value[idx] = sv
            continue
        cv = 0.5 * (value[graph.up[idx]] + value[graph.down[idx]])
        cont_value[idx] = cv
        stopping = sv >= cv - tie_tol
        ties += int(np.count_nonzero(np.abs(sv - cv) <= tie_tol))
        stop_prob[idx] = stopping.astype(float)
        value[idx] = np.maximum(sv, cv)

    table = ValueTable(graph, value, stop_value, cont_value)
    policy = StoppingPolicy(graph, stop_prob, {'prefer': 'STOP', 'tol': tie_tol})

    flow = propagate(policy)
    terminal = np.flatnonzero(graph.terminal)
    power_exp = None
    if problem.market.power is not None:
        last = graph.stage_nodes(m)
        power_exp = float(np.dot(flow.stop_mass[last], graph.power_features(problem.market.power[0])[last]))

    stats = InnerStats(
        call_expectations=_call_expectations(graph, flow.stop_mass, problem.market),
        power_expectation=power_exp,
        expected_payoff=float(np.dot(flow.node_mass[terminal], graph.phi[terminal])),
        marginals=stage_marginals(graph, flow.stop_mass),
        table=table,
        states=graph.size,
        ties=ties,
    )
    return table.root_value, policy, stats


def forward_support(policy: StoppingPolicy, lattice: Optional[LatticeSpec] = None, paths: bool = True,
                    budget: int = Config.PATH_BUDGET, min_mass: float = 1e-15):
    """
    Stopped paths charged by a policy, with their masses, and the per-stage stopped laws.

    The marginals come from vectorized mass propagation; the path set is built by a
    depth-first walk that follows every action with positive probability.
    """
    graph = policy.graph
    if lattice is not None and lattice != graph.lattice:
        raise ValueError("policy was built for a different lattice")
    flow = propagate(policy)
    marginals = stage_marginals(graph, flow.stop_mass)
    if not paths:
        return None, marginals

    m, N = graph.lattice.stages, graph.lattice.steps
    found_paths, found_mass = [], []
    stack = [(graph.root, (), (), 1.0)]
    while stack:
        idx, increments, stops, mass = stack.pop()
        stage = graph.stage_arr[idx]
        if stage > m:
            found_paths.append(StoppedPath(increments, stops))
            found_mass.append(mass)
            if len(found_paths) > budget:
                raise BudgetExceededError('support paths', len(found_paths), budget)
            continue
        t = graph.time_arr[idx]
        p = policy.stop_prob[idx]
        if t < N and p < 1.0:
            cont = 0.5 * mass * (1.0 - p)
            if cont > min_mass:
                stack.append((graph.down[idx], increments + (-1,), stops, cont))
                stack.append((graph.up[idx], increments + (1,), stops, cont))
        if p > 0.0 and mass * p > min_mass:
            stack.append((graph.stop[idx], increments, stops + (int(t),), mass * p))

    order = sorted(range(len(found_paths)), key=lambda i: (found_paths[i].stop_times, found_paths[i].increments))
    support = SupportSet(tuple(found_paths[i] for i in order), tuple(found_mass[i] for i in order))
    return support, marginals


def force_action(policy: StoppingPolicy, stage: int, t: int, level: int, action: str,
                 aux: Optional[tuple] = None) -> StoppingPolicy:
    """Copy of a policy with the action at (stage, t, level[, aux]) overridden"""
    nodes = policy.graph.find(stage, t, level, aux)
    if not nodes:
        raise KeyError(f"no state at stage {stage}, time {t}, level {level}")
    if action not in ('STOP', 'CONTINUE'):
        raise ValueError("action must be STOP or CONTINUE")
    if action == 'CONTINUE' and t >= policy.graph.lattice.steps:
        raise ValueError("stopping is forced at the horizon")
    probs = policy.stop_prob.copy()
    probs[nodes] = 1.0 if action == 'STOP' else 0.0
    return StoppingPolicy(policy.graph, probs, dict(policy.tie_rule, forced=[stage, t, level]))


@dataclass
class DualCertificate:
    """
    Lattice superhedge read off a value table.

    For every stopped walk: S0 + sum(delta * dB) + static legs >= Phi.
    """

    s0: float
    multipliers: MultiplierMatrix
    delta: np.ndarray
    min_path_residual: float
    min_state_residual: float
    walks: int
    tol: float = Config.CERTIFICATE_TOL
    graph: Optional[StateGraph] = None
    statics: Optional[np.ndarray] = None

    @property
    def min_residual(self) -> float:
        return min(self.min_path_residual, self.min_state_residual)

    @property
    def ok(self) -> bool:
        return self.min_residual >= -self.tol

    def to_dict(self):
        return {
            's0': self.s0,
            'multipliers': self.multipliers.to_dict(),
            'min_path_residual': self.min_path_residual,
            'min_state_residual': self.min_state_residual,
            'walks': self.walks,
            'ok': self.ok,
        }


def extract_certificate(problem: InnerProblem, table: ValueTable) -> DualCertificate:
    """
    Delta hedge from the value table plus both residual checks.

    The path residual minimum runs over every stopped walk of the lattice at once
    by a backward pass: R(s) = min(static + R(stop), +delta dx + R(up), -delta dx + R(down)).
    """
    graph = table.graph
    dx = graph.lattice.dx
    m = graph.lattice.stages
    U = table.value
    statics = -problem.stop_rewards(graph)

    delta = np.zeros(graph.size)
    moving = np.flatnonzero(graph.up >= 0)
    delta[moving] = (U[graph.up[moving]] - U[graph.down[moving]]) / (2.0 * dx)

    worst_state = np.inf
    future = np.full(graph.size, np.nan)
    walks = np.zeros(graph.size)
    for t, stage, idx in reversed(graph.groups):
        if stage > m:
            future[idx] = -graph.phi[idx]
            walks[idx] = 1.0
            worst_state = min(worst_state, float(np.min(U[idx] - graph.phi[idx])))
            continue
        via_stop = statics[idx] + future[graph.stop[idx]]
        # stopping: U(s) >= -static(s) + U(stop child)
        worst_state = min(worst_state, float(np.min(U[idx] + statics[idx] - U[graph.stop[idx]])))
        count = walks[graph.stop[idx]].copy()
        best = via_stop
        has_move = graph.up[idx] >= 0
        if np.any(has_move):
            mv = idx[has_move]
            up_branch = delta[mv] * dx + future[graph.up[mv]]
            down_branch = -delta[mv] * dx + future[graph.down[mv]]
            best = best.copy()
            best[has_move] = np.minimum(best[has_move], np.minimum(up_branch, down_branch))
            count[has_move] += walks[graph.up[mv]] + walks[graph.down[mv]]
            cont = 0.5 * (U[graph.up[mv]] + U[graph.down[mv]])
            worst_state = min(worst_state, float(np.min(U[mv] - cont)))
        future[idx] = best
        walks[idx] = count

    min_path = float(U[graph.root] + future[graph.root])
    return DualCertificate(
        s0=float(U[graph.root]),
        multipliers=problem.alpha,
        delta=delta,
        min_path_residual=min_path,
        min_state_residual=float(worst_state),
        walks=int(walks[graph.root]),
        graph=graph,
        statics=statics,
    )


def path_residual(certificate: DualCertificate, path: StoppedPath) -> float:
    """S0 + gains + static legs - Phi along one explicit stopped path"""
    graph = certificate.graph
    m = graph.lattice.stages
    dx = graph.lattice.dx
    idx = graph.root
    acc = certificate.s0
    stage = 1
    t = 0
    while True:
        while stage <= m and path.stop_times[stage - 1] == t:
            acc += certificate.statics[idx]
            idx = graph.stop[idx]
            stage += 1
        if stage > m:
            break
        step = path.increments[t]
        if step == 0:
            raise ValueError("hold steps are not lattice moves")
        acc += certificate.delta[idx] * step * dx
        idx = graph.up[idx] if step > 0 else graph.down[idx]
        t += 1
    return float(acc - graph.phi[idx])


def dump_table(table: ValueTable, path: str):
    """Write a value table as JSON, one record per state"""
    graph = table.graph

    def clean(v):
        return None if np.isnan(v) else float(v)

    states = [
        {
            'stage': int(graph.stage[i]), 't': int(graph.time[i]), 'level': int(graph.level[i]),
            'memory': list(graph.aux[i]), 'value': clean(table.value[i]),
            'stop': clean(table.stop_value[i]), 'continue': clean(table.cont_value[i]),
        }
        for i in range(graph.size)
    ]
    doc = {
        'skembed_schema': Config.SCHEMA_VERSION,
        'lattice': graph.lattice.to_dict(),
        'payoff': graph.payoff.to_dict(),
        'states': states,
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, sort_keys=True, indent=2)
