"""
Joining-node bootstrap: obtain a snapshot, download the headerchain and
the chaintail, then accept the snapshot only if the chain reaffirmed it.

`bootstrap_step` is a pure transition function. The owning node feeds it
message arrivals and timeouts and sends the requests it returns.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .chain import Block, BlockHeader, UtxoSet, check_block, hash256, replay_chain, validate_header_chain
from .config import DEFAULT_SUBSIDY, MAX_HEADERS_PER_MESSAGE
from .errors import ChainError, SnapshotError
from .protocol import (
    Command,
    GetHeadersPayload,
    InvItem,
    InvKind,
    InvPayload,
    Message,
    assemble_snapshot,
    block_inventory,
    inventory_id,
)
from .reaffirm import PulseParams, decide, pulse_height_for, tally, window_closed
from .snapshot import Snapshot, verify_and_apply

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    ACQUIRE_SNAPSHOT = 'acquire_snapshot'
    FETCH_HEADERS = 'fetch_headers'
    FETCH_CHAINTAIL = 'fetch_chaintail'
    VERIFYING = 'verifying'
    ACCEPTED = 'accepted'
    ABORTED = 'aborted'


TERMINAL_PHASES = (Phase.ACCEPTED, Phase.ABORTED)


@dataclass(frozen=True)
class BootstrapContext:
    """What a joiner knows before talking to anyone."""

    genesis: Block
    pulse: PulseParams
    subsidy: int = DEFAULT_SUBSIDY


# Events


@dataclass(frozen=True)
class Advertised:
    peer: int
    items: Tuple[InvItem, ...]


@dataclass(frozen=True)
class PieceReceived:
    peer: int
    snapshot_id: bytes
    index: int
    data: bytes


@dataclass(frozen=True)
class HeadersReceived:
    peer: int
    headers: Tuple[BlockHeader, ...]


@dataclass(frozen=True)
class BlockReceived:
    peer: int
    block: Block


@dataclass(frozen=True)
class TimedOut:
    attempt: int
    phase: Phase


Event = Union[Advertised, PieceReceived, HeadersReceived, BlockReceived, TimedOut]


@dataclass(frozen=True)
class BootstrapState:
    phase: Phase = Phase.ACQUIRE_SNAPSHOT
    chosen_snapshot: Optional[Tuple[bytes, Snapshot]] = None
    retries: int = 0
    attempt: int = 0
    neighbors: Tuple[int, ...] = ()
    events: int = 0
    advertisements: Mapping[int, Tuple[InvItem, ...]] = field(default_factory=dict)
    chosen_id: Optional[bytes] = None
    servers: Tuple[int, ...] = ()
    piece_hashes: Tuple[bytes, ...] = ()
    pieces: Mapping[int, bytes] = field(default_factory=dict)
    snapshot_utxo: Optional[UtxoSet] = None
    headers: Tuple[BlockHeader, ...] = ()
    header_peer: Optional[int] = None
    wanted: Mapping[bytes, int] = field(default_factory=dict)
    chaintail: Mapping[int, Block] = field(default_factory=dict)
    utxo: Optional[UtxoSet] = None
    reason: Optional[str] = None
    culprits: Tuple[int, ...] = ()
    history: Tuple[Phase, ...] = (Phase.ACQUIRE_SNAPSHOT,)

    @property
    def snapshot(self) -> Optional[Snapshot]:
        return self.chosen_snapshot[1] if self.chosen_snapshot else None

    @property
    def tip_height(self) -> int:
        return len(self.headers) - 1

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL_PHASES


@dataclass(frozen=True)
class StepResult:
    state: BootstrapState
    requests: Tuple[Tuple[int, Message], ...] = ()


def choose_snapshot(advertisements: Mapping[int, Optional[bytes]]) -> Optional[bytes]:
    """
    Id advertised by an absolute majority of neighbors.

    Args:
        advertisements: neighbor -> advertised id, None for no advertisement
    """
    votes = Counter(snapshot_id for snapshot_id in advertisements.values() if snapshot_id is not None)
    if not votes:
        return None
    snapshot_id, count = max(votes.items(), key=lambda item: (item[1], item[0]))
    if 2 * count > len(advertisements):
        return snapshot_id
    return None


def start_attempt(state: BootstrapState, neighbors: Sequence[int]) -> StepResult:
    """Begin a fresh ACQUIRE_SNAPSHOT round with a new neighbor set."""
    fresh = BootstrapState(
        retries=state.retries,
        attempt=state.attempt + 1,
        neighbors=tuple(neighbors),
        events=state.events,
    )
    requests = tuple((peer, Message(Command.GETSTATE)) for peer in fresh.neighbors)
    return StepResult(fresh, requests)


def bootstrap_step(state: BootstrapState, event: Event, context: BootstrapContext) -> StepResult:
    """
    Advance the joining-node state machine by one event.

    Events that do not belong to the current phase or attempt are counted
    and otherwise ignored.
    """
    if state.terminal:
        return StepResult(state)
    state = replace(state, events=state.events + 1)

    if isinstance(event, TimedOut):
        if event.attempt == state.attempt and event.phase is state.phase:
            return _abort(state, f"timeout in {state.phase.value}")
        return StepResult(state)
    if state.phase is Phase.ACQUIRE_SNAPSHOT:
        if isinstance(event, Advertised):
            return _on_advertised(state, event)
        if isinstance(event, PieceReceived):
            return _on_piece(state, event, context)
    elif state.phase is Phase.FETCH_HEADERS and isinstance(event, HeadersReceived):
        return _on_headers(state, event, context)
    elif state.phase is Phase.FETCH_CHAINTAIL and isinstance(event, BlockReceived):
        return _on_block(state, event, context)
    return StepResult(state)


def _enter(state: BootstrapState, phase: Phase, **changes) -> BootstrapState:
    return replace(state, phase=phase, history=state.history + (phase,), **changes)


def _abort(state: BootstrapState, reason: str, culprits: Sequence[int] = ()) -> StepResult:
    logger.warning(f"Bootstrap attempt {state.attempt} aborted in {state.phase.value}: {reason}")
    return StepResult(_enter(
        state, Phase.ABORTED,
        retries=state.retries + 1,
        reason=reason,
        culprits=tuple(culprits),
    ))


def _on_advertised(state: BootstrapState, event: Advertised) -> StepResult:
    if event.peer not in state.neighbors or event.peer in state.advertisements or state.chosen_id:
        return StepResult(state)
    advertisements = dict(state.advertisements)
    advertisements[event.peer] = tuple(event.items)
    state = replace(state, advertisements=advertisements)
    if len(advertisements) < len(state.neighbors):
        return StepResult(state)

    ids = {peer: inventory_id(items) for peer, items in advertisements.items()}
    chosen = choose_snapshot(ids)
    if chosen is None:
        return _abort(state, "no snapshot advertised by a majority of neighbors")
    servers = tuple(sorted(peer for peer, snapshot_id in ids.items() if snapshot_id == chosen))
    piece_hashes = tuple(item.hash for item in advertisements[servers[0]])
    logger.debug(f"Chose snapshot {chosen.hex()[:16]} advertised by {len(servers)}/{len(ids)} neighbors")

    # Pieces are spread round-robin so that every server is asked for some
    assigned: Dict[int, List[InvItem]] = {}
    for index, piece_hash in enumerate(piece_hashes):
        peer = servers[index % len(servers)]
        assigned.setdefault(peer, []).append(InvItem(InvKind.STATE_ITEM, piece_hash))
    requests = tuple(
        (peer, Message(Command.GETDATA, InvPayload(tuple(items)))) for peer, items in assigned.items()
    )
    return StepResult(replace(state, chosen_id=chosen, servers=servers, piece_hashes=piece_hashes), requests)


def _on_piece(state: BootstrapState, event: PieceReceived, context: BootstrapContext) -> StepResult:
    if state.chosen_id is None or event.snapshot_id != state.chosen_id:
        return StepResult(state)
    if not 0 <= event.index < len(state.piece_hashes) or event.index in state.pieces:
        return StepResult(state)
    if hash256(event.data) != state.piece_hashes[event.index]:
        return _abort(state, f"piece {event.index} from peer {event.peer} does not match its inventory hash",
                      culprits=[event.peer])
    pieces = dict(state.pieces)
    pieces[event.index] = bytes(event.data)
    state = replace(state, pieces=pieces)
    if len(pieces) < len(state.piece_hashes):
        return StepResult(state)

    try:
        snapshot = assemble_snapshot(pieces)
        snapshot_utxo = verify_and_apply(snapshot, state.chosen_id)
    except SnapshotError as e:
        return _abort(state, f"snapshot rejected: {e}", culprits=state.servers)

    header_peer = state.servers[0]
    state = _enter(
        state, Phase.FETCH_HEADERS,
        chosen_snapshot=(state.chosen_id, snapshot),
        snapshot_utxo=snapshot_utxo,
        headers=(context.genesis.header,),
        header_peer=header_peer,
    )
    return StepResult(state, ((header_peer, _getheaders(state.headers[-1])),))


def _getheaders(last: BlockHeader) -> Message:
    return Message(Command.GETHEADERS, GetHeadersPayload((last.block_id,)))


def _on_headers(state: BootstrapState, event: HeadersReceived, context: BootstrapContext) -> StepResult:
    if event.peer != state.header_peer:
        return StepResult(state)
    state = replace(state, headers=state.headers + tuple(event.headers))
    if len(event.headers) == MAX_HEADERS_PER_MESSAGE:
        return StepResult(state, ((event.peer, _getheaders(state.headers[-1])),))

    try:
        validate_header_chain(state.headers, context.genesis.block_id)
    except ChainError as e:
        return _abort(state, str(e), culprits=[event.peer])

    snapshot = state.snapshot
    height = snapshot.height
    if pulse_height_for(height, context.pulse) != height:
        return _abort(state, f"snapshot height {height} is not a pulse height", culprits=state.servers)
    if height > state.tip_height or state.headers[height].block_id != snapshot.header.block_id:
        return _abort(state, f"snapshot block at height {height} is not on the header chain",
                      culprits=state.servers)
    if not window_closed(state.tip_height, height, context.pulse):
        return _abort(state, f"reaffirmation window of pulse {height} still open at tip {state.tip_height}")

    wanted = {state.headers[h].block_id: h for h in range(height + 1, state.tip_height + 1)}
    assigned: Dict[int, List[bytes]] = {}
    for offset, block_id in enumerate(wanted):
        assigned.setdefault(state.servers[offset % len(state.servers)], []).append(block_id)
    requests = tuple(
        (peer, Message(Command.GETDATA, block_inventory(ids))) for peer, ids in assigned.items()
    )
    return StepResult(_enter(state, Phase.FETCH_CHAINTAIL, wanted=wanted), requests)


def _on_block(state: BootstrapState, event: BlockReceived, context: BootstrapContext) -> StepResult:
    height = state.wanted.get(event.block.block_id)
    if height is None or height in state.chaintail:
        return StepResult(state)
    try:
        check_block(event.block)
    except ChainError as e:
        return _abort(state, f"chaintail block {height} invalid: {e}", culprits=[event.peer])
    chaintail = dict(state.chaintail)
    chaintail[height] = event.block
    state = replace(state, chaintail=chaintail)
    if len(chaintail) < len(state.wanted):
        return StepResult(state)
    return _verify(_enter(state, Phase.VERIFYING), context)


def _verify(state: BootstrapState, context: BootstrapContext) -> StepResult:
    """Tally the snapshot's window inside the fetched chain and replay the chaintail."""
    pulse_height = state.snapshot.height
    window = [(h, state.chaintail[h]) for h in sorted(state.chaintail)]
    outcome = decide(tally(window, pulse_height, context.pulse), context.pulse)
    if not outcome.is_accepted or outcome.snapshot_id != state.chosen_id:
        return _abort(state, f"pulse {pulse_height} outcome on the fetched chain is {outcome.describe()}",
                      culprits=state.servers)
    try:
        utxo = replay_chain(
            [state.chaintail[h] for h in sorted(state.chaintail)],
            context.subsidy,
            base=state.snapshot_utxo,
            start_height=pulse_height + 1,
        )
    except ChainError as e:
        return _abort(state, f"chaintail does not apply to the snapshot: {e}", culprits=state.servers)
    logger.info(f"Snapshot at height {pulse_height} accepted after {state.events} events")
    return StepResult(_enter(state, Phase.ACCEPTED, utxo=utxo))
