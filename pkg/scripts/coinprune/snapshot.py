"""
UTXO snapshots: chunked serialization and layered identifiers.

A snapshot is a 40-byte header (height, pulse block id, chunk count) and
chunks of serialized UTXO entries in canonical order. Its identifier is
hash256 over the concatenated hash256 of the header and of every chunk.
"""

import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from io import BytesIO
from pathlib import Path
from typing import List, Tuple

from .chain import OutPoint, TxOut, UtxoSet, hash256
from .config import DEFAULT_CHUNK_LIMIT, SNAPSHOT_HEADER_SIZE
from .errors import ChainError, MalformedSnapshotError, SnapshotError, TamperError

logger = logging.getLogger(__name__)

_HEADER_STRUCT = struct.Struct('<I32sI')


@dataclass(frozen=True)
class SnapshotHeader:
    height: int
    block_id: bytes
    chunk_count: int

    def serialize(self) -> bytes:
        return _HEADER_STRUCT.pack(self.height, bytes(self.block_id), self.chunk_count)

    @classmethod
    def deserialize(cls, data: bytes) -> 'SnapshotHeader':
        if len(data) != SNAPSHOT_HEADER_SIZE:
            raise MalformedSnapshotError(
                f"Snapshot header must be {SNAPSHOT_HEADER_SIZE} bytes, got {len(data)}"
            )
        return cls(*_HEADER_STRUCT.unpack(data))


@dataclass(frozen=True)
class Snapshot:
    header: SnapshotHeader
    chunks: Tuple[bytes, ...]

    def __post_init__(self):
        object.__setattr__(self, 'chunks', tuple(bytes(c) for c in self.chunks))

    @property
    def height(self) -> int:
        return self.header.height

    @cached_property
    def snapshot_id(self) -> bytes:
        return snapshot_id(self)

    @property
    def payload_size(self) -> int:
        return SNAPSHOT_HEADER_SIZE + sum(len(c) for c in self.chunks)

    @property
    def file_size(self) -> int:
        """Size of the .cpsnap serialization."""
        return SNAPSHOT_HEADER_SIZE + sum(4 + len(c) for c in self.chunks)

    def piece(self, index: int) -> bytes:
        """Transfer piece: 0 is the header, i is chunk i."""
        if index == 0:
            return self.header.serialize()
        return self.chunks[index - 1]


def serialize_entry(outpoint: OutPoint, txout: TxOut) -> bytes:
    return outpoint.serialize() + txout.serialize()


def create_snapshot(utxo: UtxoSet, height: int, block_id: bytes,
                    chunk_limit: int = DEFAULT_CHUNK_LIMIT) -> Snapshot:
    """
    Serialize a UTXO set into greedily packed chunks.

    A chunk is closed when the next entry would push it past chunk_limit;
    entries are never split.
    """
    chunks: List[bytes] = []
    current: List[bytes] = []
    size = 0
    for outpoint, txout in utxo.sorted_items():
        entry = serialize_entry(outpoint, txout)
        if len(entry) > chunk_limit:
            raise SnapshotError(f"Entry of {len(entry)} bytes exceeds chunk limit {chunk_limit}")
        if current and size + len(entry) > chunk_limit:
            chunks.append(b''.join(current))
            current, size = [], 0
        current.append(entry)
        size += len(entry)
    if current:
        chunks.append(b''.join(current))
    header = SnapshotHeader(height, bytes(block_id), len(chunks))
    logger.debug(f"Snapshot at height {height}: {len(utxo)} entries in {len(chunks)} chunks")
    return Snapshot(header, tuple(chunks))


def chunk_hashes(snapshot: Snapshot) -> List[bytes]:
    """[hash256(header), hash256(chunk_1), ...]."""
    return [hash256(snapshot.header.serialize())] + [hash256(chunk) for chunk in snapshot.chunks]


def id_from_hashes(hashes: List[bytes]) -> bytes:
    return hash256(b''.join(hashes))


def snapshot_id(snapshot: Snapshot) -> bytes:
    return id_from_hashes(chunk_hashes(snapshot))


def decode_entries(payload: bytes) -> List[Tuple[OutPoint, TxOut]]:
    """Parse a stream of serialized UTXO entries."""
    stream = BytesIO(payload)
    entries = []
    try:
        while stream.tell() < len(payload):
            outpoint = OutPoint.read(stream)
            entries.append((outpoint, TxOut.read(stream)))
    except ChainError as e:
        raise MalformedSnapshotError(f"Undecodable entry: {e}") from e
    return entries


def decode_snapshot(snapshot: Snapshot) -> UtxoSet:
    """Decode and check ordering without verifying the identifier."""
    if snapshot.header.chunk_count != len(snapshot.chunks):
        raise MalformedSnapshotError(
            f"Header announces {snapshot.header.chunk_count} chunks, found {len(snapshot.chunks)}"
        )
    entries = {}
    last_key = None
    for index, chunk in enumerate(snapshot.chunks, 1):
        if not chunk or len(chunk) > DEFAULT_CHUNK_LIMIT:
            raise MalformedSnapshotError(f"Chunk {index} has invalid size {len(chunk)}")
        for outpoint, txout in decode_entries(chunk):
            key = (bytes(outpoint.txid), outpoint.vout)
            if last_key is not None and key <= last_key:
                raise MalformedSnapshotError(f"Entries out of order or duplicated in chunk {index}")
            last_key = key
            entries[outpoint] = txout
    return UtxoSet(entries)


def verify_and_apply(snapshot: Snapshot, expected: bytes) -> UtxoSet:
    """
    Verify an untrusted snapshot against an expected identifier.

    Raises:
        MalformedSnapshotError: chunk count mismatch or bad ordering
        TamperError: recomputed identifier differs from expected
    """
    if snapshot.header.chunk_count != len(snapshot.chunks):
        raise MalformedSnapshotError(
            f"Header announces {snapshot.header.chunk_count} chunks, found {len(snapshot.chunks)}"
        )
    actual = snapshot_id(snapshot)
    if actual != expected:
        raise TamperError(f"Snapshot id {actual.hex()} does not match expected {bytes(expected).hex()}")
    return decode_snapshot(snapshot)


def craft_invalid_snapshot(utxo: UtxoSet, height: int, block_id: bytes, owner_script: bytes,
                           amount: int, chunk_limit: int = DEFAULT_CHUNK_LIMIT) -> Snapshot:
    """Snapshot of `utxo` plus an output that never existed, paying owner_script."""
    entries = utxo.entries()
    forged = OutPoint(hash256(b'forged' + struct.pack('<I', height) + bytes(owner_script)), 0)
    entries[forged] = TxOut(amount, owner_script, height, False)
    return create_snapshot(UtxoSet(entries), height, block_id, chunk_limit)


# Files


def serialize_utxo(utxo: UtxoSet) -> bytes:
    """Canonical entry stream, the same layout chunks use."""
    return b''.join(serialize_entry(outpoint, txout) for outpoint, txout in utxo.sorted_items())


def parse_utxo(data: bytes) -> UtxoSet:
    entries = {}
    for outpoint, txout in decode_entries(data):
        if outpoint in entries:
            raise MalformedSnapshotError(f"Duplicate entry {outpoint.txid.hex()}:{outpoint.vout}")
        entries[outpoint] = txout
    return UtxoSet(entries)


def serialize_snapshot(snapshot: Snapshot) -> bytes:
    parts = [snapshot.header.serialize()]
    for chunk in snapshot.chunks:
        parts.append(struct.pack('<I', len(chunk)))
        parts.append(chunk)
    return b''.join(parts)


def parse_snapshot(data: bytes) -> Snapshot:
    """Parse the .cpsnap layout; chunk_count is not trusted here."""
    header = SnapshotHeader.deserialize(data[:SNAPSHOT_HEADER_SIZE])
    chunks = []
    offset = SNAPSHOT_HEADER_SIZE
    while offset < len(data):
        if offset + 4 > len(data):
            raise MalformedSnapshotError("Truncated chunk length prefix")
        (length,) = struct.unpack_from('<I', data, offset)
        offset += 4
        if offset + length > len(data):
            raise MalformedSnapshotError(f"Chunk of {length} bytes truncated")
        chunks.append(data[offset:offset + length])
        offset += length
    return Snapshot(header, tuple(chunks))


def write_snapshot(path: Path, snapshot: Snapshot) -> bytes:
    """Write a .cpsnap file atomically and return the snapshot id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix('.tmp')
    temp_path.write_bytes(serialize_snapshot(snapshot))
    temp_path.replace(path)
    return snapshot_id(snapshot)


def read_snapshot(path: Path) -> Snapshot:
    return parse_snapshot(Path(path).read_bytes())

