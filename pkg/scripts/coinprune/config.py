"""Configuration and constants for CoinPrune."""

from pathlib import Path

# Consensus limits
MAX_BLOCK_SIZE = 1_048_576
MAX_COINBASE_DATA = 100
MAX_SCRIPT_SIZE = 256
MAX_WITNESS_SIZE = 256
COIN = 100_000_000
MAX_MONEY = 21_000_000 * COIN
DEFAULT_SUBSIDY = 50 * COIN

# Easiest regtest-style target: every other nonce satisfies it
DEFAULT_BITS = 0x207FFFFF
GENESIS_TIMESTAMP = 1_231_006_505

# Snapshots
DEFAULT_CHUNK_LIMIT = 1_048_576
SNAPSHOT_HEADER_SIZE = 40
SNAPSHOT_SUFFIX = '.cpsnap'

# Reaffirmation markers
MARKER_PREFIX = b'CoinPrune/'
MARKER_SUFFIX = b'/'
MARKER_LENGTH = 75

# Pulse presets: (delta_p, delta_r, k)
DEFAULT_PULSE = (64, 16, 3)
MAINNET_PULSE = (10_000, 1_000, 3)

# Wire protocol
DEFAULT_MAGIC = 0x43505231
PROTOCOL_VERSION = 70016
MIN_PROTOCOL_VERSION = 70001
NODE_NETWORK = 1 << 0
NODE_COINPRUNE = 1 << 24
MAX_HEADERS_PER_MESSAGE = 2000
COMMAND_SIZE = 12
FRAME_HEADER_SIZE = 20

# Storage
META_RECORD_SIZE = 132
MAX_RETAINED_SNAPSHOTS = 2

# Nodes and simulation
DEFAULT_NEIGHBORS = 8
DEFAULT_MAX_RETRIES = 5
DEFAULT_BLOCK_INTERVAL = 600
DEFAULT_LATENCY = (5, 40)
DEFAULT_PHASE_TIMEOUT = 2_000
WORKLOAD_KEYS = 16
TX_FEE = 1_000

# Logging
LOG_ENV_VAR = 'COINPRUNE_LOG'
LOG_LEVELS = ('error', 'info', 'debug')
DEFAULT_LOG_LEVEL = 'info'

# Default paths
DEFAULT_SCENARIO_DIR = Path(__file__).parents[2] / 'data' / 'scenarios'
DEFAULT_OUTPUT_DIR = Path('output')
METRICS_FILENAME = 'metrics.ndjson'
SUMMARY_FILENAME = 'summary.csv'
SUMMARY_COLUMNS = [
    'node_id', 'role', 'bytes_bodies', 'bytes_metas', 'bytes_snapshot',
    'traffic_in', 'traffic_out', 'join_outcome', 'events_to_accept'
]
