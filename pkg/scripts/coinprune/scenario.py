"""
Scenario files: loading, schema validation and adversary injection.

Scenarios are JSON (or YAML) documents. Node groups carry a `count` in the
file and are expanded to one NodeSpec per node on load.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import yaml

from .config import (
    DEFAULT_BITS,
    DEFAULT_BLOCK_INTERVAL,
    DEFAULT_CHUNK_LIMIT,
    DEFAULT_LATENCY,
    DEFAULT_MAGIC,
    DEFAULT_MAX_RETRIES,
    DEFAULT_NEIGHBORS,
    DEFAULT_PHASE_TIMEOUT,
    DEFAULT_PULSE,
    DEFAULT_SCENARIO_DIR,
    DEFAULT_SUBSIDY,
)
from .errors import CoinPruneError, ScenarioError
from .node import Misbehavior, NodeConfig, Role
from .reaffirm import PulseParams
from .workload import WorkloadSpec

logger = logging.getLogger(__name__)

ROLE_NAMES = [role.value for role in Role if role is not Role.JOINING]
MISBEHAVIOR_NAMES = [m.value for m in Misbehavior]

SCENARIO_SCHEMA: Dict[str, Any] = {
    'type': 'object',
    'required': ['nodes'],
    'additionalProperties': False,
    'properties': {
        'name': {'type': 'string'},
        'description': {'type': 'string'},
        'seed': {'type': 'integer', 'minimum': 0, 'maximum': 2**64 - 1},
        'pulse': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'delta_p': {'type': 'integer', 'minimum': 2},
                'delta_r': {'type': 'integer', 'minimum': 1},
                'k': {'type': 'integer', 'minimum': 1},
            },
        },
        'chain_length': {'type': 'integer', 'minimum': 1},
        'block_interval': {'type': 'number', 'exclusiveMinimum': 0},
        'latency': {
            'type': 'array',
            'items': {'type': 'number', 'minimum': 0},
            'minItems': 2,
            'maxItems': 2,
        },
        'chunk_limit': {'type': 'integer', 'minimum': 64},
        'subsidy': {'type': 'integer', 'minimum': 1},
        'bits': {'type': 'integer', 'minimum': 1},
        'magic': {'type': 'integer', 'minimum': 0, 'maximum': 0xFFFFFFFF},
        'neighbor_count': {'type': 'integer', 'minimum': 1},
        'max_retries': {'type': 'integer', 'minimum': 0},
        'phase_timeout': {'type': 'number', 'exclusiveMinimum': 0},
        'workload': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'txs_per_block': {'type': 'integer', 'minimum': 0},
                'outputs_per_tx': {'type': 'integer', 'minimum': 1},
                'spend_ratio': {'type': 'number', 'minimum': 0, 'maximum': 1},
            },
        },
        'nodes': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['role'],
                'additionalProperties': False,
                'properties': {
                    'role': {'enum': ROLE_NAMES},
                    'count': {'type': 'integer', 'minimum': 1},
                    'mining_power': {'type': 'number', 'minimum': 0},
                    'misbehavior': {'enum': MISBEHAVIOR_NAMES},
                },
            },
        },
        'joins': {
            'type': 'array',
            'items': {
                'type': 'object',
                'additionalProperties': False,
                'properties': {
                    'kind': {'enum': ['coinprune', 'legacy']},
                    'height': {'type': 'integer', 'minimum': 0},
                    'time': {'type': 'number', 'minimum': 0},
                    'eclipse': {'type': 'boolean'},
                },
                'oneOf': [{'required': ['height']}, {'required': ['time']}],
            },
        },
        'adversaries': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['kind'],
                'additionalProperties': False,
                'properties': {
                    'kind': {'type': 'string'},
                    'power_share': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
                    'count': {'type': 'integer', 'minimum': 1},
                },
            },
        },
    },
}


class AdversaryKind(str, Enum):
    INVALID_REAFFIRMER = 'INVALID_REAFFIRMER'
    CHUNK_TAMPERER = 'CHUNK_TAMPERER'
    ECLIPSE_NEIGHBORS = 'ECLIPSE_NEIGHBORS'


@dataclass(frozen=True)
class NodeSpec:
    role: Role
    mining_power: float = 0.0
    misbehavior: Optional[Misbehavior] = None

    def node_config(self, scenario: 'Scenario') -> NodeConfig:
        return NodeConfig(
            role=self.role,
            pulse=scenario.pulse,
            chunk_limit=scenario.chunk_limit,
            mining_power=self.mining_power,
            neighbor_count=scenario.neighbor_count,
            honest=self.misbehavior is None,
            misbehavior=self.misbehavior,
        )


@dataclass(frozen=True)
class JoinSpec:
    kind: str = 'coinprune'
    height: Optional[int] = None
    time: Optional[float] = None
    eclipse: bool = False

    def node_config(self, scenario: 'Scenario') -> NodeConfig:
        role = Role.JOINING if self.kind == 'coinprune' else Role.LEGACY_FULL
        return NodeConfig(
            role=role,
            pulse=scenario.pulse,
            chunk_limit=scenario.chunk_limit,
            neighbor_count=scenario.neighbor_count,
            eclipse=self.eclipse,
        )


@dataclass(frozen=True)
class Scenario:
    nodes: Tuple[NodeSpec, ...]
    name: str = 'scenario'
    seed: int = 0
    pulse: PulseParams = field(default_factory=PulseParams.default)
    chain_length: int = 300
    block_interval: float = DEFAULT_BLOCK_INTERVAL
    latency: Tuple[float, float] = DEFAULT_LATENCY
    chunk_limit: int = DEFAULT_CHUNK_LIMIT
    subsidy: int = DEFAULT_SUBSIDY
    bits: int = DEFAULT_BITS
    magic: int = DEFAULT_MAGIC
    neighbor_count: int = DEFAULT_NEIGHBORS
    max_retries: int = DEFAULT_MAX_RETRIES
    phase_timeout: float = DEFAULT_PHASE_TIMEOUT
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    joins: Tuple[JoinSpec, ...] = ()

    def __post_init__(self):
        if not self.nodes:
            raise ScenarioError("Scenario needs at least one node")
        if self.total_power <= 0:
            raise ScenarioError("Scenario needs at least one miner with positive mining_power")
        if self.latency[0] > self.latency[1]:
            raise ScenarioError(f"latency min {self.latency[0]} exceeds max {self.latency[1]}")

    @property
    def total_power(self) -> float:
        return sum(spec.mining_power for spec in self.nodes)

    def with_seed(self, seed: int) -> 'Scenario':
        return replace(self, seed=seed)

    def as_dict(self) -> Dict[str, Any]:
        """Expanded, JSON-ready form recorded in metrics."""
        data = asdict(self)
        data['latency'] = list(self.latency)
        data['nodes'] = [
            {
                'role': spec.role.value,
                'mining_power': spec.mining_power,
                'misbehavior': spec.misbehavior.value if spec.misbehavior else None,
            }
            for spec in self.nodes
        ]
        data['joins'] = [asdict(join) for join in self.joins]
        return data


def validate_scenario(data: Dict[str, Any]):
    """
    Raises:
        ScenarioError: naming the offending path
    """
    try:
        jsonschema.validate(instance=data, schema=SCENARIO_SCHEMA)
    except jsonschema.ValidationError as e:
        path = '/'.join(str(part) for part in e.absolute_path) or '<root>'
        raise ScenarioError(f"Invalid scenario at {path}: {e.message}") from e


def scenario_from_dict(data: Dict[str, Any]) -> Scenario:
    validate_scenario(data)
    try:
        pulse = PulseParams(**{**dict(zip(('delta_p', 'delta_r', 'k'), DEFAULT_PULSE)), **data.get('pulse', {})})
    except CoinPruneError as e:
        raise ScenarioError(f"Invalid scenario at pulse: {e}") from e

    nodes: List[NodeSpec] = []
    for group in data['nodes']:
        role = Role(group['role'])
        misbehavior = Misbehavior(group['misbehavior']) if 'misbehavior' in group else None
        if role is Role.ADVERSARY_MINER and misbehavior is None:
            raise ScenarioError("ADVERSARY_MINER nodes need a misbehavior")
        spec = NodeSpec(role, float(group.get('mining_power', 0.0)), misbehavior)
        nodes.extend([spec] * group.get('count', 1))

    scenario = Scenario(
        nodes=tuple(nodes),
        name=data.get('name', 'scenario'),
        seed=data.get('seed', 0),
        pulse=pulse,
        chain_length=data.get('chain_length', 300),
        block_interval=data.get('block_interval', DEFAULT_BLOCK_INTERVAL),
        latency=tuple(data.get('latency', DEFAULT_LATENCY)),
        chunk_limit=data.get('chunk_limit', DEFAULT_CHUNK_LIMIT),
        subsidy=data.get('subsidy', DEFAULT_SUBSIDY),
        bits=data.get('bits', DEFAULT_BITS),
        magic=data.get('magic', DEFAULT_MAGIC),
        neighbor_count=data.get('neighbor_count', DEFAULT_NEIGHBORS),
        max_retries=data.get('max_retries', DEFAULT_MAX_RETRIES),
        phase_timeout=data.get('phase_timeout', DEFAULT_PHASE_TIMEOUT),
        workload=WorkloadSpec(**data.get('workload', {})),
        joins=tuple(JoinSpec(**join) for join in data.get('joins', [])),
    )
    for adversary in data.get('adversaries', []):
        options = {key: value for key, value in adversary.items() if key != 'kind'}
        scenario = inject_adversary(scenario, adversary['kind'], **options)
    return scenario


def load_scenario(path: Path) -> Scenario:
    """Load a .json, .yaml or .yml scenario file."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"Scenario file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            if path.suffix in ('.yaml', '.yml'):
                data = yaml.safe_load(f)
            else:
                data = json.load(f)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ScenarioError(f"Cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioError(f"Scenario file is empty or not a mapping: {path}")
    scenario = scenario_from_dict(data)
    logger.debug(f"Loaded scenario {scenario.name} with {len(scenario.nodes)} nodes from {path}")
    return scenario


def list_presets(directory: Path = DEFAULT_SCENARIO_DIR) -> List[Path]:
    directory = Path(directory)
    if not directory.exists():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix in ('.json', '.yaml', '.yml'))


def inject_adversary(scenario: Scenario, kind: str, power_share: float = 0.3,
                     count: Optional[int] = None) -> Scenario:
    """
    Return a scenario with one adversary behavior added.

    INVALID_REAFFIRMER turns the last CoinPrune miner into an adversary
    miner holding `power_share` of the total mining power. CHUNK_TAMPERER
    makes `count` serving nodes (default 1) flip bytes in served pieces.
    ECLIPSE_NEIGHBORS adds `count` nodes (default neighbor_count) serving
    the crafted snapshot and pins the first CoinPrune joiner to them.

    Raises:
        ScenarioError: unknown kind, or no node fit for conversion
    """
    try:
        kind = AdversaryKind(kind)
    except ValueError as e:
        raise ScenarioError(f"Unknown adversary kind: {kind}") from e
    nodes = list(scenario.nodes)

    if kind is AdversaryKind.INVALID_REAFFIRMER:
        if not 0 < power_share < 1:
            raise ScenarioError(f"power_share must be in (0, 1), got {power_share}")
        miners = [i for i, spec in enumerate(nodes) if spec.role is Role.COINPRUNE_MINER]
        if len(miners) < 2:
            raise ScenarioError("INVALID_REAFFIRMER needs at least two CoinPrune miners")
        target = miners[-1]
        rest = scenario.total_power - nodes[target].mining_power
        nodes[target] = NodeSpec(
            Role.ADVERSARY_MINER,
            mining_power=rest * power_share / (1 - power_share),
            misbehavior=Misbehavior.INVALID_REAFFIRM,
        )
        return replace(scenario, nodes=tuple(nodes))

    if kind is AdversaryKind.CHUNK_TAMPERER:
        wanted = count or 1
        servers = [i for i, spec in enumerate(nodes)
                   if spec.role is Role.COINPRUNE_FULL and spec.misbehavior is None]
        servers += [i for i, spec in enumerate(nodes)
                    if spec.role is Role.COINPRUNE_MINER and spec.misbehavior is None]
        if len(servers) < wanted:
            raise ScenarioError(f"CHUNK_TAMPERER needs {wanted} honest CoinPrune nodes, found {len(servers)}")
        for i in servers[:wanted]:
            nodes[i] = replace(nodes[i], misbehavior=Misbehavior.TAMPER_CHUNKS)
        return replace(scenario, nodes=tuple(nodes))

    coinprune_joins = [i for i, join in enumerate(scenario.joins) if join.kind == 'coinprune']
    if not coinprune_joins:
        raise ScenarioError("ECLIPSE_NEIGHBORS needs a CoinPrune join event")
    nodes.extend([NodeSpec(Role.COINPRUNE_FULL, misbehavior=Misbehavior.SERVE_INVALID)]
                 * (count or scenario.neighbor_count))
    joins = list(scenario.joins)
    joins[coinprune_joins[0]] = replace(joins[coinprune_joins[0]], eclipse=True)
    return replace(scenario, nodes=tuple(nodes), joins=tuple(joins))
