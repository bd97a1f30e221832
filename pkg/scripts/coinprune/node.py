"""
Role-parameterized node state machine.

One Node class covers legacy full nodes, CoinPrune full nodes and miners,
archival nodes, adversaries and joiners. A node only talks to the world
through its Transport: messages out, timers in.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Set, Union

from .bootstrap import (
    Advertised,
    BlockReceived,
    BootstrapContext,
    BootstrapState,
    HeadersReceived,
    Phase,
    PieceReceived,
    StepResult,
    TimedOut,
    bootstrap_step,
    start_attempt,
)
from .chain import (
    Block,
    ChainIndexEntry,
    UtxoSet,
    apply_block,
    build_block,
    check_block,
    fork_choice,
    hash256,
    replay_chain,
    work_from_bits,
)
from .config import (
    DEFAULT_BITS,
    DEFAULT_CHUNK_LIMIT,
    DEFAULT_MAX_RETRIES,
    DEFAULT_NEIGHBORS,
    DEFAULT_PHASE_TIMEOUT,
    DEFAULT_SUBSIDY,
    MAX_HEADERS_PER_MESSAGE,
    PROTOCOL_VERSION,
)
from .errors import ChainError, FatalReorgError, HandshakeError, ScenarioError
from .protocol import (
    Command,
    GetHeadersPayload,
    HeadersPayload,
    InvKind,
    InvPayload,
    LinkCapabilities,
    Message,
    StateChunkPayload,
    VersionPayload,
    block_inventory,
    negotiate,
    state_inventory,
    version_message,
)
from .reaffirm import PulseOutcome, PulseParams, decide, encode_marker, in_window, pulse_height_for, tally
from .snapshot import Snapshot, chunk_hashes, craft_invalid_snapshot, create_snapshot, serialize_utxo
from .store import NodeStore
from .workload import Workload

logger = logging.getLogger(__name__)

# Recent UTXO states kept for cheap shallow reorgs
UTXO_HISTORY = 32


class Role(str, Enum):
    LEGACY_FULL = 'LEGACY_FULL'
    COINPRUNE_FULL = 'COINPRUNE_FULL'
    COINPRUNE_MINER = 'COINPRUNE_MINER'
    ADVERSARY_MINER = 'ADVERSARY_MINER'
    ARCHIVAL = 'ARCHIVAL'
    JOINING = 'JOINING'


class Misbehavior(str, Enum):
    INVALID_REAFFIRM = 'invalid_reaffirm'
    SERVE_INVALID = 'serve_invalid'
    TAMPER_CHUNKS = 'tamper_chunks'


class JoinOutcome(str, Enum):
    ACCEPTED = 'ACCEPTED'
    SYNCED = 'SYNCED'
    FAILED = 'FAILED'


@dataclass(frozen=True)
class NodeConfig:
    role: Role
    pulse: PulseParams = field(default_factory=PulseParams.default)
    chunk_limit: int = DEFAULT_CHUNK_LIMIT
    mining_power: float = 0.0
    neighbor_count: int = DEFAULT_NEIGHBORS
    honest: bool = True
    misbehavior: Optional[Misbehavior] = None
    eclipse: bool = False

    def __post_init__(self):
        if self.role is Role.ADVERSARY_MINER and self.misbehavior is None:
            raise ScenarioError("ADVERSARY_MINER needs a configured misbehavior")
        if self.misbehavior is not None and self.honest:
            raise ScenarioError(f"A node with misbehavior {self.misbehavior.value} cannot be honest")
        if self.mining_power < 0:
            raise ScenarioError(f"mining_power must be >= 0, got {self.mining_power}")
        if self.neighbor_count < 1:
            raise ScenarioError(f"neighbor_count must be >= 1, got {self.neighbor_count}")
        if self.chunk_limit < 1:
            raise ScenarioError(f"chunk_limit must be positive, got {self.chunk_limit}")

    @property
    def coinprune(self) -> bool:
        return self.role is not Role.LEGACY_FULL

    @property
    def prunes(self) -> bool:
        return self.role in (Role.COINPRUNE_FULL, Role.COINPRUNE_MINER, Role.JOINING)

    @property
    def reaffirms(self) -> bool:
        return self.role in (Role.COINPRUNE_MINER, Role.ADVERSARY_MINER)

    @property
    def serves_invalid(self) -> bool:
        return self.misbehavior in (Misbehavior.INVALID_REAFFIRM, Misbehavior.SERVE_INVALID)


@dataclass
class JoinRecord:
    node_id: int
    kind: str
    started_at: float
    outcome: Optional[JoinOutcome] = None
    retries: int = 0
    events_to_accept: Optional[int] = None
    accepted_snapshot: Optional[str] = None
    snapshot_height: Optional[int] = None
    aborts: List[str] = field(default_factory=list)
    neighbor_sets: List[List[int]] = field(default_factory=list)
    finished_at: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            'node_id': self.node_id,
            'kind': self.kind,
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'outcome': self.outcome.value if self.outcome else None,
            'retries': self.retries,
            'events_to_accept': self.events_to_accept,
            'accepted_snapshot': self.accepted_snapshot,
            'snapshot_height': self.snapshot_height,
            'aborts': list(self.aborts),
            'neighbor_sets': [list(n) for n in self.neighbor_sets],
        }


@dataclass(frozen=True)
class HandshakeTimedOut:
    """Fires when a joiner's neighbor set has not answered VERSION with VERACK."""

    neighbor_set: int


Timer = Union[TimedOut, HandshakeTimedOut]


class Transport(Protocol):
    now: float

    def send(self, src: int, dst: int, message: Message): ...

    def schedule(self, delay: float, node_id: int, event: Timer): ...

    def pick_neighbors(self, node_id: int) -> List[int]: ...

    def disconnect(self, a: int, b: int): ...


class Node:
    """A simulated peer. Single-threaded; all state is owned by the node."""

    def __init__(self, node_id: int, config: NodeConfig, genesis: Block, transport: Transport,
                 subsidy: int = DEFAULT_SUBSIDY, bits: int = DEFAULT_BITS,
                 max_retries: int = DEFAULT_MAX_RETRIES, phase_timeout: float = DEFAULT_PHASE_TIMEOUT):
        self.node_id = node_id
        self.config = config
        self.initial_role = config.role
        self.role = config.role
        self.genesis = genesis
        self.transport = transport
        self.subsidy = subsidy
        self.bits = bits
        self.max_retries = max_retries
        self.phase_timeout = phase_timeout

        self.store = NodeStore(archival=not config.prunes)
        self.index: Dict[bytes, ChainIndexEntry] = {}
        self.chain: List[bytes] = []
        self.side_blocks: Dict[bytes, Block] = {}
        self.orphans: Dict[bytes, List[Block]] = {}
        self.orphan_ids: Set[bytes] = set()
        self.invalid: Set[bytes] = set()
        self.requested: Set[bytes] = set()
        self.utxo = UtxoSet()
        self.utxo_history: Dict[int, UtxoSet] = {}
        self.base_height = -1
        self.base_utxo = UtxoSet()
        self.candidate_utxo: Optional[UtxoSet] = None
        self.crafted: Optional[Snapshot] = None
        self.advertised_crafted: Optional[Snapshot] = None
        self.decisions: Dict[int, PulseOutcome] = {}
        self.links: Dict[int, Optional[LinkCapabilities]] = {}
        self.ready_links: Set[int] = set()
        self.failure: Optional[str] = None
        self.rejected_blocks = 0
        self.blocks_mined = 0
        self.storage_samples: List[dict] = []
        self._arrival = itertools.count()
        self._piece_cache: Dict[bytes, Dict[bytes, int]] = {}

        self.join: Optional[JoinRecord] = None
        self.bootstrap: Optional[BootstrapState] = None
        self.banned: Set[int] = set()
        self.tried: Set[int] = set()
        self.awaiting_state: Set[int] = set()
        self.messages_received = 0
        self.sync_peer: Optional[int] = None
        self.sync_height = 0
        self.sync_target: Optional[int] = None

        if config.role is not Role.JOINING:
            self._connect_genesis()

    # Chain state

    @property
    def tip_id(self) -> bytes:
        return self.chain[-1]

    @property
    def tip_height(self) -> int:
        return len(self.chain) - 1

    @property
    def pulse(self) -> PulseParams:
        return self.config.pulse

    @property
    def bootstrapping(self) -> bool:
        return self.bootstrap is not None and not self.bootstrap.terminal

    @property
    def established(self) -> bool:
        """Synchronized enough to serve peers and mine."""
        if self.failure is not None or not self.chain:
            return False
        return self.join is None or self.join.outcome in (JoinOutcome.ACCEPTED, JoinOutcome.SYNCED)

    @property
    def utxo_digest(self) -> str:
        return hash256(serialize_utxo(self.utxo)).hex()

    def _connect_genesis(self):
        header = self.genesis.header
        entry = ChainIndexEntry(header, 0, work_from_bits(header.bits), next(self._arrival))
        self.index[self.genesis.block_id] = entry
        self._append(self.genesis, apply_block(UtxoSet(), self.genesis, 0, self.subsidy))

    def _on_best_chain(self, entry: ChainIndexEntry) -> bool:
        return entry.height < len(self.chain) and self.chain[entry.height] == entry.block_id

    def block_by_id(self, block_id: bytes) -> Optional[Block]:
        entry = self.index.get(block_id)
        if entry is not None and self._on_best_chain(entry):
            return self.store.body(entry.height)
        return self.side_blocks.get(block_id)

    def locator(self) -> List[bytes]:
        """Block ids at exponentially spaced heights back from the tip."""
        ids, height, step = [], self.tip_height, 1
        while height > 0:
            ids.append(self.chain[height])
            if len(ids) >= 10:
                step *= 2
            height -= step
        ids.append(self.chain[0])
        return ids

    def _utxo_at(self, height: int) -> UtxoSet:
        if height == self.tip_height:
            return self.utxo
        if height in self.utxo_history:
            return self.utxo_history[height]
        if height == self.base_height:
            return self.base_utxo
        if height < self.base_height:
            raise FatalReorgError(f"No state below height {self.base_height}")
        blocks = []
        for h in range(self.base_height + 1, height + 1):
            body = self.store.body(h)
            if body is None:
                raise FatalReorgError(f"Body at height {h} was pruned")
            blocks.append(body)
        return replay_chain(blocks, self.subsidy, base=self.base_utxo, start_height=self.base_height + 1)

    def process_block(self, block: Block, src: Optional[int] = None):
        """Validate, connect and relay a block; orphans wait for their parent."""
        block_id = block.block_id
        if block_id in self.index or block_id in self.invalid or block_id in self.orphan_ids:
            return
        self.requested.discard(block_id)
        try:
            check_block(block)
        except ChainError as e:
            logger.debug(f"Node {self.node_id} rejected block {block_id.hex()[:16]}: {e}")
            self.invalid.add(block_id)
            self.rejected_blocks += 1
            return
        if block.header.prev_id in self.invalid:
            self.invalid.add(block_id)
            return
        if block.header.prev_id not in self.index:
            self.orphans.setdefault(block.header.prev_id, []).append(block)
            self.orphan_ids.add(block_id)
            if src is not None:
                self.send(src, Message(Command.GETHEADERS, GetHeadersPayload(tuple(self.locator()))))
            return

        pending = [block]
        while pending and self.failure is None:
            current = pending.pop()
            if self._connect(current):
                self._relay(current, src)
                children = self.orphans.pop(current.block_id, [])
                self.orphan_ids.difference_update(child.block_id for child in children)
                pending.extend(children)
        self._check_synced()

    def _connect(self, block: Block) -> bool:
        parent = self.index[block.header.prev_id]
        entry = ChainIndexEntry(
            block.header,
            parent.height + 1,
            parent.cumulative_work + work_from_bits(block.header.bits),
            next(self._arrival),
        )
        self.index[block.block_id] = entry
        parent.children.append(block.block_id)
        self.side_blocks[block.block_id] = block

        tip = self.index[self.tip_id]
        best = fork_choice([
            (tip.block_id, tip.cumulative_work, tip.arrival),
            (entry.block_id, entry.cumulative_work, entry.arrival),
        ])
        if best != entry.block_id:
            return True
        try:
            return self._activate(entry.block_id)
        except FatalReorgError as e:
            self.fail(str(e))
            return False

    def _activate(self, new_tip: bytes) -> bool:
        """Make new_tip the best tip, replaying from the fork point."""
        branch: List[ChainIndexEntry] = []
        entry = self.index[new_tip]
        while not self._on_best_chain(entry):
            branch.append(entry)
            entry = self.index[entry.header.prev_id]
        fork_height = entry.height
        branch.reverse()

        utxo = self._utxo_at(fork_height)
        staged = []
        for step in branch:
            block = self.side_blocks[step.block_id]
            try:
                utxo = apply_block(utxo, block, step.height, self.subsidy)
            except ChainError as e:
                logger.debug(f"Node {self.node_id}: block {step.block_id.hex()[:16]} invalid: {e}")
                self._mark_invalid(step.block_id)
                self.rejected_blocks += 1
                return False
            staged.append((block, utxo))

        if fork_height < self.tip_height:
            logger.debug(
                f"Node {self.node_id} reorg: fork at {fork_height}, "
                f"{self.tip_height - fork_height} blocks out, {len(staged)} in"
            )
            self._rewind(fork_height)
        for block, utxo in staged:
            self.side_blocks.pop(block.block_id, None)
            self._append(block, utxo)
        return True

    def _mark_invalid(self, block_id: bytes):
        entry = self.index.pop(block_id, None)
        self.side_blocks.pop(block_id, None)
        self.invalid.add(block_id)
        if entry is not None:
            for child in entry.children:
                self._mark_invalid(child)

    def _rewind(self, height: int):
        restored = self._utxo_at(height)
        detached = [(self.chain[h], self.store.body(h)) for h in range(height + 1, self.tip_height + 1)]
        self.store.rewind_to(height)
        self.side_blocks.update(detached)
        del self.chain[height + 1:]
        self.utxo = restored
        self.utxo_history = {h: u for h, u in self.utxo_history.items() if h <= height}
        self.decisions = {p: o for p, o in self.decisions.items() if p + self.pulse.delta_r <= height}
        if self.crafted is not None and self.crafted.height > height:
            self.crafted = None

    def _append(self, block: Block, utxo: UtxoSet):
        height = len(self.chain)
        self.store.record_block(block, height)
        self.chain.append(block.block_id)
        self.utxo = utxo
        self.utxo_history[height] = utxo
        self.utxo_history.pop(height - UTXO_HISTORY, None)
        if self.config.coinprune:
            self._pulse_hooks(height, block)

    # Pulses

    def _pulse_hooks(self, height: int, block: Block):
        params = self.pulse
        if height >= params.delta_p and height % params.delta_p == 0:
            snapshot = create_snapshot(self.utxo, height, block.block_id, self.config.chunk_limit)
            self.store.set_candidate(snapshot)
            self.candidate_utxo = self.utxo
            if self.config.serves_invalid:
                self.crafted = craft_invalid_snapshot(
                    self.utxo, height, block.block_id,
                    owner_script=hash256(f"adversary-{self.node_id}".encode('ascii')),
                    amount=self.subsidy,
                    chunk_limit=self.config.chunk_limit,
                )
            logger.debug(f"Node {self.node_id} snapshot candidate at {height}: {snapshot.snapshot_id.hex()[:16]}")

        pulse = height - params.delta_r
        if pulse >= params.delta_p and pulse % params.delta_p == 0 and pulse not in self.decisions:
            window = [(h, self.store.body(h)) for h in range(pulse + 1, height + 1)]
            self.on_pulse_outcome(pulse, decide(tally(window, pulse, params), params))

    def on_pulse_outcome(self, pulse: int, outcome: PulseOutcome):
        """Act on a closed window: accept, prune and retire, or delay pruning."""
        self.decisions[pulse] = outcome
        store = self.store
        candidate = store.candidate if store.candidate is not None and store.candidate.height == pulse else None
        if self.crafted is not None and self.crafted.height == pulse:
            self.advertised_crafted = self.crafted
        held = store.accepted_snapshot
        if held is not None and held.height == pulse and outcome.snapshot_id != held.snapshot_id:
            if not self._withdraw(held, outcome):
                return

        if outcome.is_accepted:
            accepted = store.accepted_snapshot
            if candidate is not None and candidate.snapshot_id == outcome.snapshot_id:
                store.accept_snapshot(candidate)
                if not store.archival:
                    self.base_height, self.base_utxo = pulse, self.candidate_utxo
                store.prune_below(pulse + 1)
                store.retire_old_snapshot()
                logger.debug(f"Node {self.node_id} accepted snapshot at pulse {pulse}")
            elif accepted is None or accepted.snapshot_id != outcome.snapshot_id:
                logger.warning(
                    f"Node {self.node_id}: pulse {pulse} accepted {outcome.snapshot_id.hex()[:16]}, "
                    f"which is not the self-derived snapshot; pruning delayed"
                )
                store.discard_candidate()
        else:
            logger.debug(f"Node {self.node_id}: pulse {pulse} {outcome.describe()}; pruning delayed")
            if candidate is not None:
                store.discard_candidate()
        self.sample_storage(pulse)

    def _withdraw(self, snapshot: Snapshot, outcome: PulseOutcome) -> bool:
        """Demote a snapshot a reorg stopped reaffirming; False if the node cannot go on."""
        logger.warning(
            f"Node {self.node_id}: pulse {snapshot.height} now {outcome.describe()}, "
            f"withdrawing snapshot {snapshot.snapshot_id.hex()[:16]}"
        )
        try:
            self.store.demote_snapshot(snapshot.snapshot_id)
        except FatalReorgError as e:
            self.fail(str(e))
            return False
        return True

    def sample_storage(self, pulse: Optional[int] = None):
        report = self.store.storage_report(self.utxo)
        self.storage_samples.append({
            'time': self.transport.now,
            'height': self.tip_height,
            'pulse': pulse,
            **report.as_dict(),
        })

    # Mining

    def miner_on_block(self, block: Block) -> bytes:
        """Coinbase data for the template that builds on the new best block."""
        if not self.config.reaffirms:
            return b''
        next_height = self.index[block.block_id].height + 1
        pulse = pulse_height_for(next_height - 1, self.pulse)
        if pulse is None or not in_window(next_height, pulse, self.pulse):
            return b''
        if self.config.misbehavior is Misbehavior.INVALID_REAFFIRM:
            snapshot = self.crafted
        else:
            snapshot = self.store.candidate
        if snapshot is None or snapshot.height != pulse:
            return b''
        return encode_marker(snapshot.snapshot_id)

    def mine_block(self, timestamp: int, workload: Workload) -> Block:
        tip = self.store.body(self.tip_height)
        coinbase_data = self.miner_on_block(tip)
        txs, fees = workload.transactions(self.utxo)
        coinbase = workload.coinbase(self.tip_height + 1, self.subsidy + fees, coinbase_data)
        block = build_block(self.tip_id, [coinbase] + txs, timestamp, self.bits)
        self.blocks_mined += 1
        self.process_block(block)
        return block

    # Links and messaging

    def send(self, peer: int, message: Message):
        self.transport.send(self.node_id, peer, message)

    def add_link(self, peer: int, capabilities: LinkCapabilities):
        self.links[peer] = capabilities
        self.ready_links.add(peer)

    def drop_link(self, peer: int):
        self.links.pop(peer, None)
        self.ready_links.discard(peer)
        self.awaiting_state.discard(peer)

    def connect(self, peer: int):
        self.links[peer] = None
        self.send(peer, version_message(max(self.tip_height, 0), self.config.coinprune))

    def _local_version(self) -> VersionPayload:
        return version_message(max(self.tip_height, 0), self.config.coinprune).payload

    def _relay(self, block: Block, src: Optional[int]):
        if not self.established:
            return
        inv = Message(Command.INV, block_inventory([block.block_id]))
        for peer in sorted(self.ready_links):
            if peer != src:
                self.send(peer, inv)

    def receive(self, src: int, message: Message):
        if self.failure is not None:
            return
        if src not in self.links and message.command is not Command.VERSION:
            return
        self.messages_received += 1
        handler = getattr(self, f"handle_{message.command.value}")
        handler(src, message.payload)

    def handle_version(self, src: int, payload: VersionPayload):
        if src in self.banned:
            self.transport.disconnect(self.node_id, src)
            return
        try:
            capabilities = negotiate(self._local_version(), payload)
        except HandshakeError as e:
            logger.warning(f"Node {self.node_id} dropping peer {src}: {e}")
            self.transport.disconnect(self.node_id, src)
            return
        inbound = src not in self.links
        self.links[src] = capabilities
        if inbound:
            self.send(src, version_message(max(self.tip_height, 0), self.config.coinprune))
        self.send(src, Message(Command.VERACK))

    def handle_verack(self, src: int, payload: None):
        self.ready_links.add(src)
        if self.join is not None and self.join.outcome is None and self._pending_neighbors():
            if all(peer in self.ready_links for peer in self._pending_neighbors()):
                self._neighbors_ready()

    def handle_getheaders(self, src: int, payload: GetHeadersPayload):
        if not self.established:
            return
        start = 0
        for block_id in payload.locator:
            entry = self.index.get(block_id)
            if entry is not None and self._on_best_chain(entry):
                start = entry.height
                break
        stop = min(self.tip_height, start + MAX_HEADERS_PER_MESSAGE)
        headers = []
        for height in range(start + 1, stop + 1):
            header = self.store.meta(height).header
            headers.append(header)
            if header.block_id == payload.stop:
                break
        self.send(src, Message(Command.HEADERS, HeadersPayload(tuple(headers))))

    def handle_headers(self, src: int, payload: HeadersPayload):
        if self.bootstrapping:
            self._step(HeadersReceived(src, payload.headers))
            return
        if not self.chain:
            return
        wanted = [
            header.block_id for header in payload.headers
            if header.block_id not in self.index and header.block_id not in self.requested
            and header.block_id not in self.invalid and header.block_id not in self.orphan_ids
        ]
        if wanted:
            self.requested.update(wanted)
            self.send(src, Message(Command.GETDATA, block_inventory(wanted)))
        if src == self.sync_peer and self.sync_target is None:
            if len(payload.headers) == MAX_HEADERS_PER_MESSAGE:
                self.sync_height += len(payload.headers)
                self.send(src, Message(Command.GETHEADERS, GetHeadersPayload((payload.headers[-1].block_id,))))
            else:
                self.sync_target = self.sync_height + len(payload.headers)
                self._check_synced()

    def handle_inv(self, src: int, payload: InvPayload):
        if src in self.awaiting_state and all(item.kind is InvKind.STATE_ITEM for item in payload.items):
            self.awaiting_state.discard(src)
            if self.bootstrapping:
                self._step(Advertised(src, payload.items))
            return
        if not self.established:
            return
        wanted = [
            item.hash for item in payload.items
            if item.kind is InvKind.BLOCK_ITEM and item.hash not in self.index
            and item.hash not in self.requested and item.hash not in self.invalid
            and item.hash not in self.orphan_ids
        ]
        if wanted:
            self.requested.update(wanted)
            self.send(src, Message(Command.GETDATA, block_inventory(wanted)))

    def handle_getdata(self, src: int, payload: InvPayload):
        for item in payload.items:
            if item.kind is InvKind.BLOCK_ITEM:
                block = self.block_by_id(item.hash)
                if block is not None:
                    self.send(src, Message(Command.BLOCK, block))
            elif self._coinprune_link(src):
                self._serve_piece(src, item.hash)

    def handle_block(self, src: int, payload: Block):
        if self.bootstrapping:
            self._step(BlockReceived(src, payload))
        elif self.chain:
            self.process_block(payload, src)

    def _coinprune_link(self, peer: int) -> bool:
        capabilities = self.links.get(peer)
        return capabilities is not None and capabilities.coinprune

    def handle_getstate(self, src: int, payload: None):
        if not self._coinprune_link(src) or not self.established:
            return
        snapshot = self.served_snapshot()
        if snapshot is None:
            self.send(src, Message(Command.INV, InvPayload()))
        else:
            self.send(src, state_inventory(snapshot))

    def handle_statechunk(self, src: int, payload: StateChunkPayload):
        if self.bootstrapping:
            self._step(PieceReceived(src, payload.snapshot_id, payload.index, payload.data))

    # Serving snapshots

    def served_snapshot(self) -> Optional[Snapshot]:
        """The one snapshot this node advertises: its newest accepted one."""
        if self.failure is not None:
            return None
        if self.config.serves_invalid:
            return self.advertised_crafted
        return self.store.accepted_snapshot

    def _serve_piece(self, src: int, piece_hash: bytes):
        snapshot = self.served_snapshot()
        if snapshot is None:
            return
        lookup = self._piece_cache.get(snapshot.snapshot_id)
        if lookup is None:
            lookup = {h: i for i, h in enumerate(chunk_hashes(snapshot))}
            self._piece_cache = {snapshot.snapshot_id: lookup}
        index = lookup.get(piece_hash)
        if index is None:
            return
        data = snapshot.piece(index)
        if self.config.misbehavior is Misbehavior.TAMPER_CHUNKS and data:
            flipped = bytearray(data)
            flipped[len(flipped) // 2] ^= 0x01
            data = bytes(flipped)
        self.send(src, Message(Command.STATECHUNK, StateChunkPayload(snapshot.snapshot_id, index, data)))

    # Joining

    def begin_join(self, neighbors: Sequence[int], kind: str):
        """Start joining the network through the given neighbors."""
        self.join = JoinRecord(self.node_id, kind, self.transport.now)
        if kind == 'coinprune':
            self.bootstrap = BootstrapState(attempt=0)
        self._open_neighbors(neighbors)

    def _pending_neighbors(self) -> List[int]:
        return self.join.neighbor_sets[-1] if self.join and self.join.neighbor_sets else []

    def _open_neighbors(self, neighbors: Sequence[int]):
        neighbors = sorted(neighbors)
        self.join.neighbor_sets.append(list(neighbors))
        self.tried.update(neighbors)
        if not neighbors:
            self._finish_join(JoinOutcome.FAILED, "no eligible neighbors")
            return
        for peer in neighbors:
            self.connect(peer)
        self.transport.schedule(self.phase_timeout, self.node_id, HandshakeTimedOut(len(self.join.neighbor_sets)))

    def _neighbors_ready(self):
        neighbors = self._pending_neighbors()
        if self.join.kind == 'coinprune':
            if self.bootstrap.attempt == 0 or self.bootstrap.phase is Phase.ABORTED:
                self.awaiting_state = set(neighbors)
                self._dispatch(start_attempt(self.bootstrap, neighbors))
        elif self.sync_peer is None:
            self._start_sync(neighbors[0])

    def _start_sync(self, peer: int):
        self.sync_peer = peer
        self.sync_height = self.tip_height
        self.sync_target = None
        self.send(peer, Message(Command.GETHEADERS, GetHeadersPayload(tuple(self.locator()))))

    def _check_synced(self):
        join = self.join
        if join is None or join.kind != 'legacy' or join.outcome is not None or self.sync_target is None:
            return
        if self.tip_height >= self.sync_target:
            join.events_to_accept = self.messages_received
            self._finish_join(JoinOutcome.SYNCED)

    def on_timer(self, event: Timer):
        if self.failure is not None:
            return
        if isinstance(event, HandshakeTimedOut):
            self._on_handshake_timeout(event)
        elif self.bootstrapping:
            self._step(event)

    def _awaiting_handshake(self) -> bool:
        if self.join.kind == 'coinprune':
            return self.bootstrap.attempt == 0 or self.bootstrap.phase is Phase.ABORTED
        return self.sync_peer is None

    def _on_handshake_timeout(self, event: HandshakeTimedOut):
        join = self.join
        if join is None or join.outcome is not None or event.neighbor_set != len(join.neighbor_sets):
            return
        if not self._awaiting_handshake():
            return
        silent = [peer for peer in self._pending_neighbors() if peer not in self.ready_links]
        if not silent:
            return
        reason = f"handshake timeout: no VERACK from {silent}"
        logger.warning(f"Node {self.node_id}: {reason}")
        if self.bootstrap is not None:
            self.bootstrap = replace(self.bootstrap, retries=self.bootstrap.retries + 1)
            retries = self.bootstrap.retries
        else:
            retries = join.retries + 1
        self._retry(retries, reason, silent)

    def _context(self) -> BootstrapContext:
        return BootstrapContext(self.genesis, self.pulse, self.subsidy)

    def _step(self, event):
        self._dispatch(bootstrap_step(self.bootstrap, event, self._context()))

    def _dispatch(self, result: StepResult):
        previous = self.bootstrap
        state = result.state
        self.bootstrap = state
        for peer, message in result.requests:
            self.send(peer, message)
        if not state.terminal and (state.phase is not previous.phase or state.attempt != previous.attempt):
            self.transport.schedule(self.phase_timeout, self.node_id, TimedOut(state.attempt, state.phase))
        if state.phase is Phase.ABORTED and previous.phase is not Phase.ABORTED:
            self._retry(state.retries, state.reason, state.culprits)
        elif state.phase is Phase.ACCEPTED and previous.phase is not Phase.ACCEPTED:
            self._promote(state)

    def _retry(self, retries: int, reason: str, culprits: Sequence[int]):
        join = self.join
        join.retries = retries
        join.aborts.append(reason)
        self.banned.update(culprits)
        for peer in list(self.links):
            self.transport.disconnect(self.node_id, peer)
        self.awaiting_state.clear()
        if retries > self.max_retries:
            self._finish_join(JoinOutcome.FAILED, f"gave up after {retries} aborted attempts")
            return
        self._open_neighbors(self.transport.pick_neighbors(self.node_id))

    def _promote(self, state: BootstrapState):
        """Turn an accepted bootstrap into a pruned CoinPrune full node."""
        snapshot = state.snapshot
        pulse = snapshot.height
        work = 0
        for height, header in enumerate(state.headers):
            work += work_from_bits(header.bits)
            entry = ChainIndexEntry(header, height, work, next(self._arrival))
            if height > 0:
                self.index[header.prev_id].children.append(header.block_id)
            self.index[header.block_id] = entry
            if height <= pulse:
                self.store.record_header(header, height)
                self.chain.append(header.block_id)
        self.store.accept_snapshot(snapshot)
        self.base_height, self.base_utxo = pulse, state.snapshot_utxo
        self.utxo = state.snapshot_utxo
        self.utxo_history[pulse] = self.utxo
        self.decisions[pulse] = PulseOutcome.accepted(snapshot.snapshot_id)
        for height in range(pulse + 1, state.tip_height + 1):
            block = state.chaintail[height]
            self._append(block, apply_block(self.utxo, block, height, self.subsidy))

        self.role = Role.COINPRUNE_FULL
        self.sample_storage(pulse)
        join = self.join
        join.retries = state.retries
        join.events_to_accept = state.events
        join.accepted_snapshot = snapshot.snapshot_id.hex()
        join.snapshot_height = pulse
        self._finish_join(JoinOutcome.ACCEPTED)
        self._start_sync(state.header_peer)

    def _finish_join(self, outcome: JoinOutcome, reason: Optional[str] = None):
        self.join.outcome = outcome
        self.join.finished_at = self.transport.now
        if outcome is JoinOutcome.FAILED:
            logger.warning(f"Node {self.node_id} failed to join: {reason}")
        else:
            logger.info(f"Node {self.node_id} joined: {outcome.value} at height {self.tip_height}")

    def fail(self, reason: str):
        logger.warning(f"Node {self.node_id} failed: {reason}")
        self.failure = reason

    def report(self) -> dict:
        return {
            'node_id': self.node_id,
            'role': self.initial_role.value,
            'final_role': self.role.value,
            'misbehavior': self.config.misbehavior.value if self.config.misbehavior else None,
            'tip_height': self.tip_height,
            'tip_id': self.tip_id.hex() if self.chain else None,
            'utxo_digest': self.utxo_digest if self.chain else None,
            'prune_height': self.store.prune_height,
            'accepted_snapshot': (
                self.store.accepted_snapshot.snapshot_id.hex() if self.store.accepted_snapshot else None
            ),
            'decisions': {str(p): o.describe() for p, o in sorted(self.decisions.items())},
            'rejected_blocks': self.rejected_blocks,
            'blocks_mined': self.blocks_mined,
            'failure': self.failure,
            'protocol_version': PROTOCOL_VERSION,
        }
