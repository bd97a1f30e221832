"""
Per-node storage model: block bodies, persisted block metadata and
retained snapshots, with exact serialized-size accounting.
"""

import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

from .chain import Block, BlockHeader, UtxoSet, work_from_bits
from .config import MAX_RETAINED_SNAPSHOTS, META_RECORD_SIZE, SNAPSHOT_SUFFIX
from .errors import FatalReorgError, NonContiguousHeightError, PruneRefusedError, StoreError
from .snapshot import Snapshot, read_snapshot, write_snapshot

logger = logging.getLogger(__name__)

_WORK_BYTES = 12


@dataclass(frozen=True)
class PersistedBlockMeta:
    """What a pruned node keeps per block to keep serving the headerchain."""

    block_id: bytes
    header: BlockHeader
    height: int
    cumulative_work: int
    tx_count: int

    @property
    def timestamp(self) -> int:
        return self.header.timestamp

    def serialize(self) -> bytes:
        return (
            bytes(self.block_id)
            + self.header.serialize()
            + struct.pack('<I', self.height)
            + self.cumulative_work.to_bytes(_WORK_BYTES, 'little')
            + struct.pack('<I', self.tx_count)
        )

    @classmethod
    def deserialize(cls, data: bytes) -> 'PersistedBlockMeta':
        if len(data) != META_RECORD_SIZE:
            raise StoreError(f"Meta record must be {META_RECORD_SIZE} bytes, got {len(data)}")
        header = BlockHeader.deserialize(data[32:112])
        (height,) = struct.unpack('<I', data[112:116])
        work = int.from_bytes(data[116:128], 'little')
        (tx_count,) = struct.unpack('<I', data[128:132])
        return cls(data[:32], header, height, work, tx_count)


@dataclass(frozen=True)
class StorageReport:
    bytes_bodies: int = 0
    bytes_metas: int = 0
    bytes_snapshot: int = 0
    bytes_utxo: int = 0

    @property
    def total(self) -> int:
        return self.bytes_bodies + self.bytes_metas + self.bytes_snapshot + self.bytes_utxo

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


class NodeStore:
    """
    Single-owner store. Bodies cover [prune_height, tip]; metas cover [0, tip].

    Archival stores never prune.
    """

    def __init__(self, archival: bool = False):
        self.archival = archival
        self.metas: Dict[int, PersistedBlockMeta] = {}
        self.bodies: Dict[int, Block] = {}
        self.accepted: List[Snapshot] = []
        self.candidate: Optional[Snapshot] = None
        self.prune_height = 0

    @property
    def tip_height(self) -> int:
        return len(self.metas) - 1

    @property
    def accepted_snapshot(self) -> Optional[Snapshot]:
        return self.accepted[-1] if self.accepted else None

    @property
    def snapshots(self) -> List[Snapshot]:
        retained = list(self.accepted)
        if self.candidate is not None:
            retained.append(self.candidate)
        return retained

    def meta(self, height: int) -> Optional[PersistedBlockMeta]:
        return self.metas.get(height)

    def body(self, height: int) -> Optional[Block]:
        return self.bodies.get(height)

    def headers(self, start: int = 0, stop: Optional[int] = None) -> List[BlockHeader]:
        stop = self.tip_height if stop is None else min(stop, self.tip_height)
        return [self.metas[h].header for h in range(start, stop + 1)]

    def record_block(self, block: Block, height: int) -> 'NodeStore':
        """Store a block at tip + 1 together with its derived meta."""
        if height != self.tip_height + 1:
            raise NonContiguousHeightError(f"Expected height {self.tip_height + 1}, got {height}")
        previous = self.metas.get(height - 1)
        work = (previous.cumulative_work if previous else 0) + work_from_bits(block.header.bits)
        self.metas[height] = PersistedBlockMeta(
            block.block_id, block.header, height, work, len(block.transactions)
        )
        self.bodies[height] = block
        return self

    def record_header(self, header: BlockHeader, height: int, tx_count: int = 0) -> 'NodeStore':
        """
        Store a meta without a body, for a node bootstrapped from a snapshot.

        Only valid below any stored body; tx_count is unknown and kept at 0.
        """
        if self.bodies:
            raise StoreError("Headers without bodies must precede every stored body")
        if height != self.tip_height + 1:
            raise NonContiguousHeightError(f"Expected height {self.tip_height + 1}, got {height}")
        previous = self.metas.get(height - 1)
        work = (previous.cumulative_work if previous else 0) + work_from_bits(header.bits)
        self.metas[height] = PersistedBlockMeta(header.block_id, header, height, work, tx_count)
        self.prune_height = height + 1
        return self

    def rewind_to(self, height: int) -> 'NodeStore':
        """Forget blocks above height so a competing branch can be recorded."""
        if height < self.prune_height - 1:
            raise FatalReorgError(
                f"Reorg to height {height} reaches below pruned range starting at {self.prune_height}"
            )
        for h in range(height + 1, self.tip_height + 1):
            del self.metas[h]
            self.bodies.pop(h, None)
        if self.candidate is not None and self.candidate.height > height:
            self.candidate = None
        return self

    def set_candidate(self, snapshot: Snapshot) -> 'NodeStore':
        self.candidate = snapshot
        return self

    def discard_candidate(self) -> 'NodeStore':
        self.candidate = None
        return self

    def accept_snapshot(self, snapshot: Snapshot) -> 'NodeStore':
        if self.candidate is not None and self.candidate.snapshot_id == snapshot.snapshot_id:
            self.candidate = None
        if not any(s.snapshot_id == snapshot.snapshot_id for s in self.accepted):
            self.accepted.append(snapshot)
        return self

    def prune_below(self, height: int) -> 'NodeStore':
        """
        Drop bodies below height, keeping every meta.

        Raises:
            PruneRefusedError: no accepted snapshot, or height beyond its height + 1
        """
        snapshot = self.accepted_snapshot
        if snapshot is None:
            raise PruneRefusedError("No accepted snapshot; refusing to prune")
        if height > snapshot.height + 1:
            raise PruneRefusedError(
                f"Cannot prune below {height}: accepted snapshot is at height {snapshot.height}"
            )
        if self.archival:
            logger.debug("Archival store: prune request ignored")
            return self
        for h in [h for h in self.bodies if h < height]:
            del self.bodies[h]
        self.prune_height = max(self.prune_height, height)
        logger.debug(f"Pruned bodies below {height}; retained {len(self.bodies)}")
        return self

    def retire_old_snapshot(self) -> 'NodeStore':
        """Keep only the most recent accepted snapshot (plus any candidate)."""
        if len(self.accepted) > 1:
            self.accepted = self.accepted[-1:]
        if len(self.snapshots) > MAX_RETAINED_SNAPSHOTS:
            raise StoreError(f"Retaining {len(self.snapshots)} snapshots, at most {MAX_RETAINED_SNAPSHOTS} allowed")
        return self

    def demote_snapshot(self, snapshot_id: bytes) -> 'NodeStore':
        """
        Withdraw an accepted snapshot the best chain no longer reaffirms.

        Raises:
            FatalReorgError: bodies it allowed to be pruned are gone and no
                older accepted snapshot covers them
        """
        self.accepted = [s for s in self.accepted if s.snapshot_id != snapshot_id]
        fallback = self.accepted_snapshot
        floor = fallback.height + 1 if fallback is not None else 0
        if not self.archival and self.prune_height > floor:
            raise FatalReorgError(
                f"Snapshot {snapshot_id.hex()[:16]} withdrawn but bodies below {self.prune_height} are pruned"
            )
        return self

    def storage_report(self, utxo: Optional[UtxoSet] = None) -> StorageReport:
        return StorageReport(
            bytes_bodies=sum(block.size for block in self.bodies.values()),
            bytes_metas=len(self.metas) * META_RECORD_SIZE,
            bytes_snapshot=sum(s.file_size for s in self.snapshots),
            bytes_utxo=utxo.serialized_size() if utxo is not None else 0,
        )

    # Directory persistence

    def save(self, directory: Path):
        """Write metas.bin, bodies/NNNNNNNN.blk and snapshot files."""
        directory = Path(directory)
        bodies_dir = directory / 'bodies'
        bodies_dir.mkdir(parents=True, exist_ok=True)
        (directory / 'metas.bin').write_bytes(
            b''.join(self.metas[h].serialize() for h in range(self.tip_height + 1))
        )
        for stale in bodies_dir.glob('*.blk'):
            if int(stale.stem) not in self.bodies:
                stale.unlink()
        for height, block in self.bodies.items():
            (bodies_dir / f"{height:08d}.blk").write_bytes(block.serialize())
        for stale in directory.glob(f"*{SNAPSHOT_SUFFIX}"):
            stale.unlink()
        for index, snapshot in enumerate(self.accepted):
            write_snapshot(directory / f"accepted-{index}-{snapshot.height:08d}{SNAPSHOT_SUFFIX}", snapshot)
        if self.candidate is not None:
            write_snapshot(directory / f"candidate-{self.candidate.height:08d}{SNAPSHOT_SUFFIX}", self.candidate)

    @classmethod
    def load(cls, directory: Path, archival: bool = False) -> 'NodeStore':
        directory = Path(directory)
        store = cls(archival=archival)
        data = (directory / 'metas.bin').read_bytes()
        if len(data) % META_RECORD_SIZE:
            raise StoreError(f"metas.bin length {len(data)} is not a multiple of {META_RECORD_SIZE}")
        for offset in range(0, len(data), META_RECORD_SIZE):
            meta = PersistedBlockMeta.deserialize(data[offset:offset + META_RECORD_SIZE])
            store.metas[meta.height] = meta
        for path in sorted((directory / 'bodies').glob('*.blk')):
            store.bodies[int(path.stem)] = Block.deserialize(path.read_bytes())
        store.prune_height = min(store.bodies) if store.bodies else len(store.metas)
        for path in sorted(directory.glob(f"accepted-*{SNAPSHOT_SUFFIX}")):
            store.accepted.append(read_snapshot(path))
        for path in directory.glob(f"candidate-*{SNAPSHOT_SUFFIX}"):
            store.candidate = read_snapshot(path)
        return store
