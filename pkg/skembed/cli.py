"""
Command-line front end: solve, converge, metrics, check-sg, recover, certify

Exit codes: 0 success, 1 usage or input error, 2 infeasible or arbitrage
rejection, 3 non-convergence.
"""
import argparse
import logging
import os
from typing import Dict, List, Optional

from config import Config, RunConfig
from skembed.data_io import ReportWriter, load_measures, market_to_dict, measure_to_dict, parse_market, \
    parse_measures, parse_payoff, read_json
from skembed.dual_solver import DualOptions, solve_dual, verify_certificate
from skembed.errors import (
    ArbitrageError,
    BudgetExceededError,
    InfeasibleError,
    NotConvergedError,
    NumericBreakdownError,
    SchemaError,
    SkembedError,
)
from skembed.experiments import convergence_run, make_schedule, rate_audit, recovery_run
from skembed.lattice import LatticeSpec, PayoffSpec
from skembed.log import setup_logging
from skembed.measures import MarketData, arbitrage_check
from skembed.metrics import metric_report, rate_certificate
from skembed.monotonicity import check_support
from skembed.primal_lp import ConstraintMode, solve_primal
from skembed.stopping_dp import InnerProblem, dump_table, solve_inner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REJECTED = 2
EXIT_NOT_CONVERGED = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset flags out of the namespace so config-file values survive
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', help='JSON run config; flags override its values')
    common.add_argument('--lattice-steps', dest='steps', type=int, help='lattice horizon N in steps')
    common.add_argument('--dt', type=float, help='lattice time step (dx = sqrt(dt))')
    common.add_argument('--payoff', choices=Config.PAYOFF_KINDS, help='payoff kind')
    common.add_argument('--cap', type=float, help='payoff cap')
    common.add_argument('--tol', type=float, help='dual stopping tolerance')
    common.add_argument('--feasibility-tol', dest='feasibility_tol', type=float, help='LP phase I tolerance')
    common.add_argument('--max-iters', dest='max_iters', type=int, help='dual iteration limit')
    common.add_argument('--power', nargs=2, type=float, metavar=('P', 'V'), help='power constraint mu_m(|x|^p) = V')
    common.add_argument('--horizon-sg', dest='horizon_sg', type=int, help='stop-go continuation horizon')
    common.add_argument('--nonzero-cap', dest='nonzero_cap', type=int, help='LP size cap in nonzeros')
    common.add_argument('--pivot-rule', dest='pivot_rule', choices=['bland', 'dantzig'])
    common.add_argument('--out', help='report path (bare names go under reports/)')
    common.add_argument('--trace', action='store_true', help='keep the dual iteration history')
    common.add_argument('--debug-table', dest='debug_table', help='dump the inner value table to this JSON file')
    common.add_argument('--log-dir', dest='log_dir', help='write a timestamped log file here')

    schedule = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    schedule.add_argument('--schedule', choices=['STAB', 'STAB2'])
    schedule.add_argument('--levels', type=int)
    schedule.add_argument('--base-width', dest='base_width', type=float)
    schedule.add_argument('--base-step', dest='base_step', type=float)

    parser = _Parser(prog='skembed', description='Lattice bounds for optimal Skorokhod embedding under call prices')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    solve = sub.add_parser('solve', parents=[common], help='primal LP and/or dual bound for a market file')
    solve.add_argument('inputs', nargs=1, metavar='MARKET')
    solve.add_argument('--method', choices=['primal', 'dual', 'both'], default=argparse.SUPPRESS)

    converge = sub.add_parser('converge', parents=[common, schedule], help='stability run over nested strike grids')
    converge.add_argument('inputs', nargs=1, metavar='MEASURES')
    converge.add_argument('--workers', type=int, default=argparse.SUPPRESS)

    metrics = sub.add_parser('metrics', parents=[common], help='distances between two measure files')
    metrics.add_argument('inputs', nargs=2, metavar='MEASURE')

    check_sg = sub.add_parser('check-sg', parents=[common], help='stop-go audit of an LP optimizer support')
    check_sg.add_argument('inputs', nargs=1, metavar='INSTANCE')
    check_sg.add_argument('--sg-mode', dest='sg_mode', choices=['strict', 'weak'], default=argparse.SUPPRESS)

    recover = sub.add_parser('recover', parents=[common, schedule], help='rebuild a measure from its call prices')
    recover.add_argument('inputs', nargs=1, metavar='MEASURE')

    certify = sub.add_parser('certify', parents=[common], help='dual solve plus superhedge residual check')
    certify.add_argument('inputs', nargs=1, metavar='MARKET')
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    values = vars(args).copy()
    path = values.pop('config', None)
    cfg = RunConfig.from_file(path) if path else RunConfig()
    return cfg.merged(values)


def _lattice(cfg: RunConfig, stages: int) -> LatticeSpec:
    return LatticeSpec.from_dt(cfg.steps, cfg.dt, stages)


def _payoff(cfg: RunConfig, stages: int) -> PayoffSpec:
    payoff = parse_payoff({'kind': cfg.payoff, 'cap': cfg.cap})
    payoff.check_stages(stages)
    return payoff


def _lp_opts(cfg: RunConfig) -> Dict[str, object]:
    return {'nonzero_cap': cfg.nonzero_cap, 'rule': cfg.pivot_rule, 'feasibility_tol': cfg.feasibility_tol}


def _load_market(cfg: RunConfig) -> MarketData:
    market = parse_market(read_json(cfg.inputs[0]))
    if cfg.power is not None:
        market = MarketData(market.strikes, market.calls, tuple(cfg.power))
    return market


def _single_measure(path: str):
    mus = load_measures(path)
    if len(mus) != 1:
        raise SchemaError('measures', f'{path} holds {len(mus)} measures, expected one')
    return mus[0]


def _print_violations(verdict):
    print(f"✗ market rejected by the arbitrage check ({len(verdict.violations)} violation(s))")
    for v in verdict.violations:
        kind = 'boundary' if v.boundary else 'violated'
        print(f"  {v.tag} {list(v.indices)}: slack {v.slack:.3e} ({kind})")


def cmd_solve(cfg: RunConfig, writer: ReportWriter) -> int:
    market = _load_market(cfg)
    lattice = _lattice(cfg, market.m)
    payoff = _payoff(cfg, market.m)
    verdict = arbitrage_check(market)
    doc = {
        'command': 'solve',
        'method': cfg.method,
        'lattice': lattice.to_dict(),
        'payoff': payoff.to_dict(),
        'market': market_to_dict(market),
        'arbitrage': verdict.to_dict(),
    }
    out = cfg.out or 'solve_report.json'
    if not verdict.ok:
        _print_violations(verdict)
        writer.write_json(doc, out)
        return EXIT_REJECTED

    code = EXIT_OK
    primal = dual = None
    if cfg.method in ('primal', 'both'):
        primal = solve_primal(ConstraintMode.calls(market), lattice, payoff, **_lp_opts(cfg))
        doc['primal'] = primal.to_dict()
        if not primal.optimal:
            print(f"✗ primal LP is {primal.status.value}")
            writer.write_json(doc, out)
            return EXIT_REJECTED
        print(f"✓ primal value {primal.value:.10g} ({primal.rows}x{primal.columns} LP)")

    if cfg.method in ('dual', 'both'):
        # with both methods the LP value is the level and its row prices the starting hedge
        target = primal.value if primal is not None else None
        initial = primal.hedge if primal is not None else None
        opts = DualOptions(tol=cfg.tol, max_iters=cfg.max_iters, trace=cfg.trace, target=target, initial=initial)
        dual = solve_dual(market, lattice, payoff, opts)
        doc['dual'] = dual.to_dict(trace=cfg.trace)
        mark = '✓' if dual.converged else '✗'
        print(f"{mark} dual value {dual.value:.10g} after {dual.iterations} iterations ({dual.status.value})")
        if not dual.converged:
            code = EXIT_NOT_CONVERGED

    if primal is not None and dual is not None:
        gap = dual.value - primal.value
        tolerance = Config.DUAL_GAP_TOL * (1.0 + abs(primal.value))
        doc.update({'gap': gap, 'gap_tolerance': tolerance, 'duality_ok': abs(gap) <= tolerance})
        print(f"{'✓' if abs(gap) <= tolerance else '✗'} duality gap {gap:.3e} (tolerance {tolerance:.3e})")
        if abs(gap) > tolerance:
            code = EXIT_NOT_CONVERGED

    if cfg.debug_table:
        multipliers = dual.optimizer if dual is not None else primal.hedge
        _, _, stats = solve_inner(InnerProblem(lattice, payoff, multipliers, market))
        dump_table(stats.table, cfg.debug_table)

    writer.write_json(doc, out)
    return code


def cmd_converge(cfg: RunConfig, writer: ReportWriter) -> int:
    mus = load_measures(cfg.inputs[0])
    p = cfg.power[0] if cfg.power is not None else 4.0
    schedule = make_schedule(cfg.schedule, cfg.levels, cfg.base_width, p, cfg.base_step)
    lattice = _lattice(cfg, len(mus))
    payoff = _payoff(cfg, len(mus))
    table = convergence_run(mus, payoff, schedule, lattice, use_power=cfg.power is not None, p=p,
                            workers=cfg.workers, lp_opts=_lp_opts(cfg))
    audit = rate_audit(table)

    stem, _ = os.path.splitext(cfg.out or 'rate_table.csv')
    writer.write_rate_table(table, stem + '.csv', extra={
        'command': 'converge',
        'schedule': cfg.schedule,
        'lattice': lattice.to_dict(),
        'payoff': payoff.to_dict(),
        'audit': audit.to_dict(),
    })
    for row in table.rows:
        stability = row.get('stability_bound')
        stability = f"{stability:.4g}" if stability is not None else 'n/a'
        print(f"  level {row['n']}: value {row['value']:.10g} gap {row['gap']:.3e} "
              f"bound {row['theory_bound']:.4g} stability {stability}")
    print(f"{'✓' if audit.passed else '✗'} rate audit ({table.envelope}, {table.label}): "
          f"constant {audit.constant:.4g}, slope {audit.slope}")
    return EXIT_OK


def cmd_metrics(cfg: RunConfig, writer: ReportWriter) -> int:
    a = _single_measure(cfg.inputs[0])
    b = _single_measure(cfg.inputs[1])
    report = metric_report(a, b)
    doc = {'command': 'metrics', 'certificate': rate_certificate(a, b, report.window).to_dict()}
    doc.update(report.to_dict())
    writer.write_json(doc, cfg.out or 'metrics_report.json')
    print(f"✓ rho {report.rho:.6g}  W1 {report.w1:.6g}  calls sup gap {report.calls_sup_gap:.6g}")
    return EXIT_OK


def cmd_check_sg(cfg: RunConfig, writer: ReportWriter) -> int:
    raw = read_json(cfg.inputs[0])
    if 'strikes' in raw:
        mode = ConstraintMode.calls(parse_market(raw))
    else:
        mode = ConstraintMode.of_marginals(parse_measures(raw))
    if mode.stages != 1:
        raise UsageError('check-sg works on single-maturity instances')
    lattice = _lattice(cfg, 1)
    payoff = _payoff(cfg, 1)
    solved = solve_primal(mode, lattice, payoff, with_paths=True, **_lp_opts(cfg))
    doc = {'command': 'check-sg', 'lattice': lattice.to_dict(), 'payoff': payoff.to_dict(),
           'status': solved.status.value}
    out = cfg.out or 'stop_go_report.json'
    if not solved.optimal:
        print(f"✗ primal LP is {solved.status.value}")
        writer.write_json(doc, out)
        return EXIT_REJECTED

    horizon = cfg.horizon_sg or min(cfg.steps, Config.STOP_GO_MAX_HORIZON)
    report = check_support(solved.support, payoff, lattice, horizon, mode=cfg.sg_mode)
    doc.update({'value': solved.value, 'support_paths': len(solved.support), 'stop_go': report.to_dict()})
    writer.write_json(doc, out)
    mark = '✓' if report.ok else '✗'
    print(f"{mark} {report.pairs_checked} pairs checked, {len(report.violations)} stop-go violation(s)")
    return EXIT_OK


def cmd_recover(cfg: RunConfig, writer: ReportWriter) -> int:
    mu = _single_measure(cfg.inputs[0])
    p = cfg.power[0] if cfg.power is not None else 4.0
    schedule = make_schedule(cfg.schedule, cfg.levels, cfg.base_width, p, cfg.base_step)
    frame = recovery_run(mu, schedule, p)
    doc = {'command': 'recover', 'schedule': cfg.schedule, 'measure': measure_to_dict(mu),
           'rows': frame.to_dict('records')}
    writer.write_json(doc, cfg.out or 'recovery_report.json')
    for row in doc['rows']:
        print(f"  level {row['n']}: rho {row['rho']:.4g} W {row['w1']:.4g}")
    return EXIT_OK


def cmd_certify(cfg: RunConfig, writer: ReportWriter) -> int:
    market = _load_market(cfg)
    lattice = _lattice(cfg, market.m)
    payoff = _payoff(cfg, market.m)
    dual = solve_dual(market, lattice, payoff, DualOptions(tol=cfg.tol, max_iters=cfg.max_iters, trace=cfg.trace))
    cert = verify_certificate(dual, market, lattice, payoff)
    doc = {'command': 'certify', 'lattice': lattice.to_dict(), 'payoff': payoff.to_dict(),
           'dual': dual.to_dict(trace=cfg.trace), 'certificate': cert.to_dict()}
    writer.write_json(doc, cfg.out or 'certificate_report.json')
    print(f"{'✓' if cert.ok else '✗'} min residual {cert.min_residual:.3e} over {cert.certificate.walks} walks; "
          f"S0 + static = {cert.reconciled_value:.10g} (dual {dual.value:.10g})")
    if not dual.converged or not cert.ok:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


COMMANDS = {
    'solve': cmd_solve,
    'converge': cmd_converge,
    'metrics': cmd_metrics,
    'check-sg': cmd_check_sg,
    'recover': cmd_recover,
    'certify': cmd_certify,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = run_config(args)
        cfg.validate()
    except SystemExit as e:
        return int(e.code or 0)
    except (ValueError, OSError) as e:
        print(f"✗ {e}")
        return EXIT_USAGE

    if cfg.log_dir:
        setup_logging(cfg.log_dir, Config.LOG_LEVEL)
    writer = ReportWriter()

    try:
        return COMMANDS[cfg.command](cfg, writer)
    except ArbitrageError as e:
        print(f"✗ {e}")
        if e.verdict is not None:
            for v in e.verdict.violations:
                print(f"  {v.tag} {list(v.indices)}: slack {v.slack:.3e}")
        return EXIT_REJECTED
    except InfeasibleError as e:
        print(f"✗ infeasible: {e}")
        return EXIT_REJECTED
    except (NotConvergedError, NumericBreakdownError) as e:
        print(f"✗ {e}")
        return EXIT_NOT_CONVERGED
    except (SchemaError, BudgetExceededError, UsageError) as e:
        print(f"✗ {e}")
        return EXIT_USAGE
    except (SkembedError, ValueError) as e:
        logger.error(f"{cfg.command} failed: {e}")
        print(f"✗ {e}")
        return EXIT_USAGE
