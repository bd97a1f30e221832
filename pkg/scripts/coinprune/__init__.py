"""
CoinPrune: UTXO snapshots reaffirmed on-chain, and a network simulator.

Miners publish snapshot identifiers in coinbase data after every pulse
block; nodes accept the most reaffirmed snapshot, prune old block bodies
and serve the snapshot to joining nodes, which verify it against the
chaintail before trusting it.

Usage:
    python -m scripts.coinprune --list                         # Bundled scenarios
    python -m scripts.coinprune run --scenario honest          # Run a preset
    python -m scripts.coinprune verify-snapshot --in s.cpsnap --expect-id <hex>
"""

# Core imports with no third-party dependencies
from .errors import (
    CoinPruneError,
    ChainError,
    SnapshotError,
    TamperError,
    MalformedSnapshotError,
    StoreError,
    FatalReorgError,
    ProtocolError,
    DecodeError,
    ScenarioError,
)
from .chain import Block, BlockHeader, OutPoint, Transaction, TxIn, TxOut, UtxoSet, hash256
from .snapshot import Snapshot, create_snapshot, snapshot_id, verify_and_apply
from .reaffirm import PulseParams, PulseOutcome, decide, encode_marker, parse_marker, tally


# Simulation modules pull in numpy, jsonschema, PyYAML and tqdm; import on access
def __getattr__(name: str):
    """Lazy import handler for simulation components."""
    if name in ('Node', 'NodeConfig', 'Role', 'Misbehavior'):
        from . import node
        return getattr(node, name)
    if name in ('Scenario', 'load_scenario', 'inject_adversary'):
        from . import scenario
        return getattr(scenario, name)
    if name in ('run', 'run_batch', 'Network'):
        from . import simnet
        return getattr(simnet, name)
    if name in ('Metrics', 'write_metrics'):
        from . import metrics
        return getattr(metrics, name)
    if name == 'NodeStore':
        from .store import NodeStore
        return NodeStore
    raise AttributeError(f"module '{__name__}' has no attribute '{name}'")


__all__ = [
    # Errors
    'CoinPruneError',
    'ChainError',
    'SnapshotError',
    'TamperError',
    'MalformedSnapshotError',
    'StoreError',
    'FatalReorgError',
    'ProtocolError',
    'DecodeError',
    'ScenarioError',
    # Chain
    'Block',
    'BlockHeader',
    'OutPoint',
    'Transaction',
    'TxIn',
    'TxOut',
    'UtxoSet',
    'hash256',
    # Snapshots and reaffirmation
    'Snapshot',
    'create_snapshot',
    'snapshot_id',
    'verify_and_apply',
    'PulseParams',
    'PulseOutcome',
    'decide',
    'encode_marker',
    'parse_marker',
    'tally',
    # Simulation
    'Node',
    'NodeConfig',
    'Role',
    'Misbehavior',
    'NodeStore',
    'Scenario',
    'load_scenario',
    'inject_adversary',
    'Network',
    'run',
    'run_batch',
    'Metrics',
    'write_metrics',
]
