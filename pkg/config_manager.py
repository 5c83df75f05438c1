"""
Configuration Manager
Parses the JSON run configuration against a strict schema with documented defaults
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from exceptions import ParseError
from models import BRWConfig, Point, QuadratureSpec
from walk_kernel import build_config, kernel_from_pairs, make_source

logger = logging.getLogger(__name__)

TOOL_NAME = "brw-toolkit"
TOOL_VERSION = "1.0.0"

# Default option values; anything not listed here is rejected
DEFAULTS = {
    # Numerics
    'quadrature_nodes': {
        'value': 64,
        'description': 'Initial trapezoid nodes per axis K (doubled until converged)',
        'category': 'numerics'
    },
    'quadrature_tol': {
        'value': 1e-10,
        'description': 'Cauchy tolerance between K and 2K nodes (relative, floor 1)',
        'category': 'numerics'
    },
    'max_nodes': {
        'value': 2 ** 22,
        'description': 'Cap on the total number of quadrature nodes K^d',
        'category': 'numerics'
    },
    'truncation_radius': {
        'value': 200,
        'description': 'Box radius R for the truncated operators',
        'category': 'numerics'
    },
    'lambda_floor': {
        'value': 1e-8,
        'description': 'Smallest lambda probed when searching for eigenvalues',
        'category': 'numerics'
    },
    'window_radius': {
        'value': 12,
        'description': 'Initial sup-norm radius of the eigenfunction window',
        'category': 'numerics'
    },
    'n_max': {
        'value': 10,
        'description': 'Highest moment order computed',
        'category': 'numerics'
    },
    'heat_horizon': {
        'value': 3.0,
        'description': 'Largest t used by the Duhamel checks',
        'category': 'numerics'
    },

    # Simulation
    'horizon': {
        'value': 25.0,
        'description': 'Simulation horizon T',
        'category': 'simulation'
    },
    'cap': {
        'value': 1000000,
        'description': 'Population cap; a replica exceeding it is censored',
        'category': 'simulation'
    },
    'replicas': {
        'value': 10000,
        'description': 'Number of independent replicas',
        'category': 'simulation'
    },
    'seed': {
        'value': 20240101,
        'description': 'Master seed; replica r uses SeedSequence(seed, spawn_key=(r,))',
        'category': 'simulation'
    },
    'snapshots': {
        'value': 64,
        'description': 'Points of the uniform snapshot grid on [0, T]',
        'category': 'simulation'
    },
    'site_window': {
        'value': 5,
        'description': 'Sup-norm radius of the per-site counts kept in snapshots',
        'category': 'simulation'
    },
    'bootstrap': {
        'value': 1000,
        'description': 'Bootstrap resamples for confidence intervals',
        'category': 'simulation'
    },
    'min_survivors': {
        'value': 100,
        'description': 'Fewest surviving replicas accepted by the estimators',
        'category': 'simulation'
    },
    'workers': {
        'value': 1,
        'description': 'Worker processes for replicas (results do not depend on it)',
        'category': 'simulation'
    },
    'start': {
        'value': None,
        'description': 'Initial particle position (origin when null)',
        'category': 'simulation'
    },
}

CATEGORIES = ('numerics', 'simulation')
TOP_LEVEL_KEYS = ('dim', 'kernel', 'sources') + CATEGORIES
KERNEL_ENTRY_KEYS = ('offset', 'rate')
SOURCE_ENTRY_KEYS = ('position', 'coeffs')


@dataclass
class ConfigFile:
    """Validated run configuration plus resolved options"""
    path: Optional[str]
    dim: int
    kernel_pairs: List[Tuple[Point, float]]
    source_specs: List[Tuple[Point, Tuple[float, ...]]]
    config: BRWConfig
    options: Dict[str, Any] = field(default_factory=dict)

    def get(self, key: str):
        if key not in DEFAULTS:
            raise KeyError(key)
        return self.options.get(key, DEFAULTS[key]['value'])

    def get_by_category(self) -> Dict[str, Dict[str, Any]]:
        """Resolved options grouped by category"""
        grouped = {c: {} for c in CATEGORIES}
        for key, meta in DEFAULTS.items():
            grouped[meta['category']][key] = self.get(key)
        return grouped

    def quadrature_spec(self) -> QuadratureSpec:
        return QuadratureSpec(nodes_per_axis=self.get('quadrature_nodes'),
                              tol=self.get('quadrature_tol'),
                              max_nodes=self.get('max_nodes'))

    def start(self) -> Point:
        start = self.get('start')
        return tuple(start) if start is not None else (0,) * self.dim

    def resolved(self) -> Dict[str, Any]:
        """Config with every default filled in; itself a valid config document"""
        data = {
            'dim': self.dim,
            'kernel': [{'offset': list(z), 'rate': a} for z, a in self.kernel_pairs],
            'sources': [{'position': list(p), 'coeffs': list(c)} for p, c in self.source_specs],
        }
        data.update(self.get_by_category())
        return data

    def with_options(self, **overrides) -> "ConfigFile":
        """Copy with options replaced, e.g. from command-line flags"""
        options = dict(self.options)
        for key, value in overrides.items():
            if value is None:
                continue
            options[key] = _coerce(value, key, f"--{key}")
        return ConfigFile(self.path, self.dim, self.kernel_pairs, self.source_specs,
                          self.config, options)


def _coerce(value, key: str, location: str):
    default = DEFAULTS[key]['value']
    if key == 'start':
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in value):
            raise ParseError(location, "expected a list of integers or null")
        return list(value)
    if isinstance(value, bool):
        raise ParseError(location, f"expected a number, got {value!r}")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ParseError(location, f"expected an integer, got {value!r}")
        return value
    if not isinstance(value, (int, float)):
        raise ParseError(location, f"expected a number, got {value!r}")
    return float(value)


def _check_keys(obj, allowed, location: str):
    if not isinstance(obj, dict):
        raise ParseError(location, "expected an object")
    for key in obj:
        if key not in allowed:
            raise ParseError(f"{location}.{key}", "unknown key")


def _int_vector(value, location: str) -> Point:
    if not isinstance(value, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in value):
        raise ParseError(location, "expected a list of integers")
    return tuple(value)


def _number_list(value, location: str) -> Tuple[float, ...]:
    if not isinstance(value, list) or not all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in value):
        raise ParseError(location, "expected a list of numbers")
    return tuple(float(c) for c in value)


def parse_config_data(data, path: Optional[str] = None) -> ConfigFile:
    """Validate an already decoded config document"""
    _check_keys(data, TOP_LEVEL_KEYS, "$")
    for key in ('dim', 'kernel', 'sources'):
        if key not in data:
            raise ParseError(f"$.{key}", "missing required key")

    dim = data['dim']
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ParseError("$.dim", "expected a positive integer")

    if not isinstance(data['kernel'], list):
        raise ParseError("$.kernel", "expected a list of {offset, rate} entries")
    kernel_pairs = []
    for i, entry in enumerate(data['kernel']):
        location = f"$.kernel[{i}]"
        _check_keys(entry, KERNEL_ENTRY_KEYS, location)
        offset = _int_vector(entry.get('offset'), f"{location}.offset")
        if len(offset) != dim:
            raise ParseError(f"{location}.offset", f"expected {dim} components")
        rate = entry.get('rate')
        if not isinstance(rate, (int, float)) or isinstance(rate, bool):
            raise ParseError(f"{location}.rate", "expected a number")
        kernel_pairs.append((offset, float(rate)))

    if not isinstance(data['sources'], list):
        raise ParseError("$.sources", "expected a list of {position, coeffs} entries")
    source_specs = []
    for i, entry in enumerate(data['sources']):
        location = f"$.sources[{i}]"
        _check_keys(entry, SOURCE_ENTRY_KEYS, location)
        position = _int_vector(entry.get('position'), f"{location}.position")
        if len(position) != dim:
            raise ParseError(f"{location}.position", f"expected {dim} components")
        source_specs.append((position, _number_list(entry.get('coeffs'), f"{location}.coeffs")))

    options = {}
    for category in CATEGORIES:
        section = data.get(category, {})
        allowed = [k for k, meta in DEFAULTS.items() if meta['category'] == category]
        _check_keys(section, allowed, f"$.{category}")
        for key, value in section.items():
            options[key] = _coerce(value, key, f"$.{category}.{key}")

    kernel = kernel_from_pairs(dim, kernel_pairs)
    sources = [make_source(p, c, dim) for p, c in source_specs]
    config = build_config(kernel, sources)
    logger.debug("Parsed config: d=%d, %d kernel entries, N=%d", dim, len(kernel_pairs), config.N)
    return ConfigFile(path=path, dim=dim, kernel_pairs=kernel_pairs, source_specs=source_specs,
                      config=config, options=options)


def parse_config(path) -> ConfigFile:
    """
    Read and validate a JSON config file.

    Raises:
        ParseError: unreadable file, malformed JSON (line:column) or schema violation (JSON path)
        ValidationError: the described walk or sources are invalid
    """
    path = str(path)
    try:
        text = Path(path).read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(path, f"cannot read config: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}", e.msg)
    return parse_config_data(data, path)


def describe_defaults() -> List[Dict[str, Any]]:
    """DEFAULTS as rows for display"""
    return [{'key': k, 'value': v['value'], 'category': v['category'], 'description': v['description']}
            for k, v in DEFAULTS.items()]
