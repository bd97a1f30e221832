"""
Reaffirmation markers and pulse-based coordination.

Markers are the only on-chain footprint: ASCII `CoinPrune/<64 lowercase
hex>/` inside coinbase data. Nothing here ever rejects a block; malformed
or foreign coinbase data simply carries no marker.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

from .chain import Block
from .config import DEFAULT_PULSE, MAINNET_PULSE, MARKER_LENGTH, MARKER_PREFIX, MARKER_SUFFIX
from .errors import CoinPruneError

logger = logging.getLogger(__name__)

_MARKER_PATTERN = re.compile(re.escape(MARKER_PREFIX) + rb'([0-9a-f]{64})' + re.escape(MARKER_SUFFIX))


@dataclass(frozen=True)
class PulseParams:
    delta_p: int
    delta_r: int
    k: int

    def __post_init__(self):
        if not 0 < self.delta_r < self.delta_p:
            raise CoinPruneError(f"Need 0 < delta_r < delta_p, got delta_r={self.delta_r}, delta_p={self.delta_p}")
        if self.k < 1:
            raise CoinPruneError(f"Acceptance threshold k must be >= 1, got {self.k}")

    @classmethod
    def default(cls) -> 'PulseParams':
        return cls(*DEFAULT_PULSE)

    @classmethod
    def mainnet(cls) -> 'PulseParams':
        """Mainnet-scale preset: a pulse every 10 000 blocks."""
        return cls(*MAINNET_PULSE)


class OutcomeKind(str, Enum):
    ACCEPTED = 'accepted'
    INVALID_PULSE = 'invalid_pulse'
    AMBIGUOUS = 'ambiguous'


@dataclass(frozen=True)
class PulseOutcome:
    kind: OutcomeKind
    snapshot_id: Optional[bytes] = None

    @classmethod
    def accepted(cls, snapshot_id: bytes) -> 'PulseOutcome':
        return cls(OutcomeKind.ACCEPTED, bytes(snapshot_id))

    @property
    def is_accepted(self) -> bool:
        return self.kind is OutcomeKind.ACCEPTED

    def describe(self) -> str:
        if self.is_accepted:
            return f"accepted {self.snapshot_id.hex()}"
        return self.kind.value


INVALID_PULSE = PulseOutcome(OutcomeKind.INVALID_PULSE)
AMBIGUOUS = PulseOutcome(OutcomeKind.AMBIGUOUS)


@dataclass
class ReaffirmationTally:
    pulse_height: int
    counts: Dict[bytes, int] = field(default_factory=dict)

    def add(self, snapshot_id: bytes):
        self.counts[snapshot_id] = self.counts.get(snapshot_id, 0) + 1

    def count(self, snapshot_id: bytes) -> int:
        return self.counts.get(snapshot_id, 0)


def encode_marker(snapshot_id: bytes) -> bytes:
    """75-byte ASCII marker for the coinbase field."""
    return MARKER_PREFIX + bytes(snapshot_id).hex().encode('ascii') + MARKER_SUFFIX


def parse_marker(coinbase_data: Optional[bytes]) -> Optional[bytes]:
    """First well-formed marker in untrusted coinbase data, or None."""
    if not coinbase_data or len(coinbase_data) < MARKER_LENGTH:
        return None
    match = _MARKER_PATTERN.search(bytes(coinbase_data))
    if match is None:
        return None
    return bytes.fromhex(match.group(1).decode('ascii'))


def pulse_height_for(height: int, params: PulseParams) -> Optional[int]:
    """Largest positive multiple of delta_p not above height."""
    if height < params.delta_p:
        return None
    return height - height % params.delta_p


def in_window(height: int, pulse_height: int, params: PulseParams) -> bool:
    return pulse_height < height <= pulse_height + params.delta_r


def window_closed(tip_height: int, pulse_height: int, params: PulseParams) -> bool:
    return tip_height >= pulse_height + params.delta_r


def tally(blocks: Iterable[Tuple[int, Block]], pulse_height: int, params: PulseParams) -> ReaffirmationTally:
    """
    Count markers in best-chain blocks of a pulse's window.

    Args:
        blocks: (height, block) pairs on the caller's best chain
        pulse_height: The pulse the window belongs to
        params: Pulse parameters

    Returns:
        Counts per snapshot id, at most one per block
    """
    result = ReaffirmationTally(pulse_height)
    for height, block in blocks:
        if not in_window(height, pulse_height, params):
            continue
        marker = parse_marker(block.coinbase.coinbase_data)
        if marker is not None:
            result.add(marker)
    return result


def decide(result: ReaffirmationTally, params: PulseParams) -> PulseOutcome:
    """Accept the unique most-reaffirmed id if it reached k."""
    if not result.counts:
        return INVALID_PULSE
    best = max(result.counts.values())
    if best < params.k:
        return INVALID_PULSE
    leaders = [snapshot_id for snapshot_id, count in result.counts.items() if count == best]
    if len(leaders) > 1:
        return AMBIGUOUS
    return PulseOutcome.accepted(leaders[0])
