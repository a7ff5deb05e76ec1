"""
JSON/CSV ingestion and report writing
Market, measure and payoff files in, schema-versioned reports out
"""
import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np

from config import Config
from skembed.errors import SchemaError
from skembed.lattice import PayoffKind, PayoffSpec
from skembed.measures import DiscreteMeasure, MarketData

logger = logging.getLogger(__name__)

SCHEMA_KEY = 'skembed_schema'


def _check_schema(doc: Dict[str, Any]):
    version = doc.get(SCHEMA_KEY, Config.SCHEMA_VERSION)
    if version != Config.SCHEMA_VERSION:
        raise SchemaError(SCHEMA_KEY, f"unsupported version {version!r}")


def _number_list(value, field: str) -> List[float]:
    if not isinstance(value, list) or not value:
        raise SchemaError(field, 'expected a non-empty list of numbers')
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{field}[{i}]", f'expected a number, got {type(v).__name__}')
        out.append(float(v))
    return out


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(os.path.basename(path), f'invalid JSON ({e.msg} at line {e.lineno})')
    if not isinstance(doc, dict):
        raise SchemaError(os.path.basename(path), 'top level must be an object')
    _check_schema(doc)
    return doc


def parse_market(doc: Dict[str, Any]) -> MarketData:
    """{"strikes": [...], "calls": [[...], ...], "power": {"p": .., "V": ..}?}"""
    if 'strikes' not in doc:
        raise SchemaError('strikes', 'missing')
    if 'calls' not in doc:
        raise SchemaError('calls', 'missing')
    strikes = _number_list(doc['strikes'], 'strikes')
    rows = doc['calls']
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        raise SchemaError('calls', 'expected one list of prices per maturity')
    calls = [_number_list(row, f'calls[{i}]') for i, row in enumerate(rows)]
    for i, row in enumerate(calls):
        if len(row) != len(strikes):
            raise SchemaError(f'calls[{i}]', f'has {len(row)} prices for {len(strikes)} strikes')

    power = None
    if doc.get('power') is not None:
        spec = doc['power']
        if not isinstance(spec, dict):
            raise SchemaError('power', 'expected {"p": ..., "V": ...}')
        for key in ('p', 'V'):
            if key not in spec:
                raise SchemaError(f'power.{key}', 'missing')
        power = (_number_list([spec['p']], 'power.p')[0], _number_list([spec['V']], 'power.V')[0])
    return MarketData(np.array(strikes), np.array(calls), power)


def market_to_dict(market: MarketData) -> Dict[str, Any]:
    doc = {
        SCHEMA_KEY: Config.SCHEMA_VERSION,
        'strikes': market.strikes.tolist(),
        'calls': market.calls.tolist(),
    }
    if market.power is not None:
        doc['power'] = {'p': market.power[0], 'V': market.power[1]}
    return doc


def parse_measure(doc: Dict[str, Any], field: str = 'atoms') -> DiscreteMeasure:
    atoms = doc.get('atoms')
    if not isinstance(atoms, list) or not atoms:
        raise SchemaError(field, 'expected a non-empty list of [position, mass] pairs')
    pairs = []
    for i, atom in enumerate(atoms):
        if not isinstance(atom, list) or len(atom) != 2:
            raise SchemaError(f'{field}[{i}]', 'expected [position, mass]')
        pairs.append(tuple(_number_list(atom, f'{field}[{i}]')))
    try:
        return DiscreteMeasure.from_atoms(pairs)
    except ValueError as e:
        raise SchemaError(field, str(e))


def parse_measures(doc: Dict[str, Any]) -> List[DiscreteMeasure]:
    """A single {"atoms": ...} or a vector {"measures": [{"atoms": ...}, ...]}"""
    if 'measures' in doc:
        items = doc['measures']
        if not isinstance(items, list) or not items:
            raise SchemaError('measures', 'expected a non-empty list of measures')
        return [parse_measure(item if isinstance(item, dict) else {}, f'measures[{i}].atoms')
                for i, item in enumerate(items)]
    return [parse_measure(doc)]


def measure_to_dict(mu: DiscreteMeasure) -> Dict[str, Any]:
    return {'atoms': [[x, w] for x, w in mu.atoms]}


def parse_payoff(doc: Dict[str, Any]) -> PayoffSpec:
    """{"kind": "LOOKBACK_MAX_CAPPED", "cap": 3.0}"""
    kind = doc.get('kind')
    if kind not in PayoffKind.__members__:
        raise SchemaError('payoff.kind', f'unknown kind {kind!r}')
    cap = doc.get('cap')
    if isinstance(cap, bool) or not isinstance(cap, (int, float)) or not cap > 0:
        raise SchemaError('payoff.cap', 'expected a number > 0')
    return PayoffSpec(PayoffKind(kind), float(cap))


def load_measures(path: str) -> List[DiscreteMeasure]:
    return parse_measures(read_json(path))


def _plain(value):
    """json.dump fallback for numpy scalars and arrays"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(doc: Dict[str, Any]) -> str:
    body = dict(doc)
    body[SCHEMA_KEY] = Config.SCHEMA_VERSION
    return json.dumps(body, sort_keys=True, indent=2, default=_plain, allow_nan=False) + '\n'


class ReportWriter:
    """Writes JSON reports and RateTable CSVs, keeping a tally of what was written"""

    def __init__(self, out_dir: Optional[str] = None):
        self.out_dir = out_dir or Config.REPORT_DIR
        self.stats = {
            'json_written': 0,
            'csv_written': 0,
            'files': [],
        }

    def _target(self, path: str) -> str:
        if not os.path.isabs(path) and os.path.dirname(path) == '':
            path = os.path.join(self.out_dir, path)
        parent = os.path.dirname(path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        return path

    def write_json(self, doc: Dict[str, Any], path: str) -> str:
        target = self._target(path)
        with open(target, 'w', encoding='utf-8') as f:
            f.write(dumps(_finite(doc)))
        self.stats['json_written'] += 1
        self.stats['files'].append(target)
        logger.info(f"wrote report {target}")
        return target

    def write_rate_table(self, table, path: str, extra: Optional[Dict[str, Any]] = None) -> str:
        """CSV with the fixed rate columns plus a JSON sidecar with the full rows"""
        target = self._target(path)
        table.write_csv(target)
        self.stats['csv_written'] += 1
        self.stats['files'].append(target)
        stem, _ = os.path.splitext(target)
        doc = table.to_dict()
        doc.update(extra or {})
        self.write_json(doc, stem + '.json')
        return target


def _finite(value):
    """Non-finite floats become null so reports stay strict JSON"""
    if isinstance(value, np.ndarray):
        return _finite(value.tolist())
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    return value
