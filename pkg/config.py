"""
Configuration module for the skembed solver suite
"""
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional


class Config:
    """Solver defaults"""

    # Market data checks
    ARBITRAGE_SLACK = 1e-9
    BOUNDARY_FLAG_SLACK = 1e-6
    MEASURE_TOL = 1e-12

    # Lattice
    LATTICE_STEPS = 12
    LATTICE_DT = 1.0
    PATH_BUDGET = 2_000_000
    STATE_BUDGET = 200_000
    ENUMERATION_MAX_STEPS = 14

    # Optimal stopping
    STOP_TIE_TOL = 1e-12
    CERTIFICATE_TOL = 1e-8

    # Linear programming
    LP_FEASIBILITY_TOL = 1e-9
    LP_PIVOT_TOL = 1e-11
    LP_NONZERO_CAP = 20_000
    LP_PIVOT_RULE = 'bland'
    LP_MAX_PIVOTS = 200_000

    # Dual subgradient
    DUAL_TOL = 1e-7
    DUAL_WINDOW = 50
    DUAL_MAX_ITERS = 5000
    # relative duality gap accepted as converged
    DUAL_GAP_TOL = 1e-3

    # Stop-go checker
    STOP_GO_MARGIN = 1e-9
    STOP_GO_MAX_HORIZON = 12
    PAIR_BUDGET = 200_000

    # Experiments
    CONVERGE_WORKERS = 4
    RATE_AUDIT_FACTOR = 10.0

    # Reports and logging
    REPORT_DIR = 'reports'
    LOG_DIR = 'logs'
    LOG_LEVEL = 'INFO'
    SCHEMA_VERSION = 1

    PAYOFF_KINDS = [
        'LOOKBACK_MAX_CAPPED',
        'STOPPED_ABS_CAPPED',
        'RANGE_CAPPED',
        'FORWARD_STRADDLE_CAPPED',
        'TIME_SQUARED_CAPPED',
    ]

    @staticmethod
    def validate():
        """Validates that the solver defaults are usable"""
        problems = []

        positive = [
            'ARBITRAGE_SLACK', 'MEASURE_TOL', 'LATTICE_DT', 'STOP_TIE_TOL',
            'CERTIFICATE_TOL', 'LP_FEASIBILITY_TOL', 'LP_PIVOT_TOL', 'DUAL_TOL',
            'DUAL_GAP_TOL', 'STOP_GO_MARGIN', 'RATE_AUDIT_FACTOR',
        ]
        for name in positive:
            if not getattr(Config, name) > 0:
                problems.append(name)

        at_least_one = [
            'LATTICE_STEPS', 'PATH_BUDGET', 'STATE_BUDGET', 'LP_NONZERO_CAP',
            'DUAL_WINDOW', 'DUAL_MAX_ITERS', 'PAIR_BUDGET', 'CONVERGE_WORKERS',
        ]
        for name in at_least_one:
            if getattr(Config, name) < 1:
                problems.append(name)

        if Config.LP_PIVOT_RULE not in ('bland', 'dantzig'):
            problems.append('LP_PIVOT_RULE')

        if problems:
            raise ValueError(f"Invalid configuration values: {', '.join(problems)}")

        return True


@dataclass
class RunConfig:
    """Everything one CLI invocation needs; built from a config file and flags"""

    command: str = ''
    inputs: List[str] = field(default_factory=list)
    steps: int = Config.LATTICE_STEPS
    dt: float = Config.LATTICE_DT
    payoff: str = 'STOPPED_ABS_CAPPED'
    cap: float = 10.0
    method: str = 'both'
    power: Optional[List[float]] = None
    tol: float = Config.DUAL_TOL
    feasibility_tol: float = Config.LP_FEASIBILITY_TOL
    max_iters: int = Config.DUAL_MAX_ITERS
    horizon_sg: Optional[int] = None
    nonzero_cap: int = Config.LP_NONZERO_CAP
    pivot_rule: str = Config.LP_PIVOT_RULE
    schedule: str = 'STAB'
    levels: int = 4
    base_width: float = 1.0
    base_step: float = 1.0
    workers: int = Config.CONVERGE_WORKERS
    sg_mode: str = 'strict'
    trace: bool = False
    log_dir: Optional[str] = None
    debug_table: Optional[str] = None
    out: Optional[str] = None

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        """Load a JSON config file; unknown keys are rejected"""
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config file must hold a JSON object")
        raw.pop('skembed_schema', None)
        return cls().merged(raw)

    def merged(self, values: Dict[str, Any]) -> 'RunConfig':
        """payoff may also be given as {"kind": ..., "cap": ...}; its cap then sets cap"""
        payoff = values.get('payoff')
        if isinstance(payoff, dict):
            extra = sorted(set(payoff) - {'kind', 'cap'})
            if extra:
                raise ValueError(f"Unknown payoff keys: {', '.join(extra)}")
            values = dict(values, payoff=payoff.get('kind'))
            if 'cap' in payoff:
                values['cap'] = payoff['cap']
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(self, **values)

    def validate(self):
        """Validates the run settings and referenced input files"""
        problems = []
        if self.steps < 1:
            problems.append('steps must be >= 1')
        if not self.dt > 0:
            problems.append('dt must be > 0')
        if not self.tol > 0 or not self.feasibility_tol > 0:
            problems.append('tolerances must be > 0')
        if self.max_iters < 1:
            problems.append('max_iters must be >= 1')
        if self.payoff not in Config.PAYOFF_KINDS:
            problems.append(f'unknown payoff kind {self.payoff}')
        if self.power is not None and len(self.power) != 2:
            problems.append('power takes two values: p V')
        if self.method not in ('primal', 'dual', 'both'):
            problems.append(f'unknown method {self.method}')
        if self.pivot_rule not in ('bland', 'dantzig'):
            problems.append(f'unknown pivot rule {self.pivot_rule}')
        if self.schedule not in ('STAB', 'STAB2'):
            problems.append(f'unknown schedule {self.schedule}')
        if self.levels < 2:
            problems.append('levels must be >= 2')
        if self.workers < 1:
            problems.append('workers must be >= 1')
        if self.horizon_sg is not None and not 1 <= self.horizon_sg <= Config.STOP_GO_MAX_HORIZON:
            problems.append(f'horizon_sg must lie in 1..{Config.STOP_GO_MAX_HORIZON}')
        if self.sg_mode not in ('strict', 'weak'):
            problems.append(f'unknown stop-go mode {self.sg_mode}')
        if isinstance(self.cap, bool) or not isinstance(self.cap, (int, float)) or not self.cap > 0:
            problems.append('cap must be > 0')
        for path in self.inputs:
            if not os.path.exists(path):
                problems.append(f'input file not found: {path}')

        if problems:
            raise ValueError('; '.join(problems))

        return True
