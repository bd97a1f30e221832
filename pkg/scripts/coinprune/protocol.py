"""
Wire codec for the Bitcoin-like P2P protocol and the CoinPrune additions.

Frame: magic(4) | command(12, zero padded ASCII) | length(4) | payload.
Integers are little-endian; lists carry a 32-bit count. There is no
checksum since simulated links are reliable.
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from io import BytesIO
from typing import Dict, Optional, Sequence, Tuple, Union

from .chain import HASH_SIZE, Block, BlockHeader, hash256, read_exact, read_u32
from .config import (
    COMMAND_SIZE,
    DEFAULT_MAGIC,
    FRAME_HEADER_SIZE,
    MAX_HEADERS_PER_MESSAGE,
    MIN_PROTOCOL_VERSION,
    NODE_COINPRUNE,
    NODE_NETWORK,
    PROTOCOL_VERSION,
)
from .errors import ChainError, DecodeError, HandshakeError, SnapshotError
from .snapshot import Snapshot, SnapshotHeader, chunk_hashes

logger = logging.getLogger(__name__)

_FRAME_STRUCT = struct.Struct('<I12sI')
_VERSION_STRUCT = struct.Struct('<IQI')


class Command(str, Enum):
    VERSION = 'version'
    VERACK = 'verack'
    GETHEADERS = 'getheaders'
    HEADERS = 'headers'
    GETDATA = 'getdata'
    BLOCK = 'block'
    INV = 'inv'
    GETSTATE = 'getstate'
    STATECHUNK = 'statechunk'


class InvKind(IntEnum):
    BLOCK_ITEM = 2
    STATE_ITEM = 0x20


@dataclass(frozen=True)
class VersionPayload:
    protocol_version: int = PROTOCOL_VERSION
    services: int = NODE_NETWORK
    best_height: int = 0

    @property
    def coinprune(self) -> bool:
        return bool(self.services & NODE_COINPRUNE)


@dataclass(frozen=True)
class InvItem:
    kind: InvKind
    hash: bytes


@dataclass(frozen=True)
class InvPayload:
    """Shared by INV and GETDATA."""

    items: Tuple[InvItem, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'items', tuple(self.items))


@dataclass(frozen=True)
class GetHeadersPayload:
    locator: Tuple[bytes, ...]
    stop: bytes = bytes(HASH_SIZE)

    def __post_init__(self):
        object.__setattr__(self, 'locator', tuple(bytes(h) for h in self.locator))


@dataclass(frozen=True)
class HeadersPayload:
    headers: Tuple[BlockHeader, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'headers', tuple(self.headers))


@dataclass(frozen=True)
class StateChunkPayload:
    snapshot_id: bytes
    index: int
    data: bytes


Payload = Union[None, VersionPayload, InvPayload, GetHeadersPayload, HeadersPayload, Block, StateChunkPayload]


@dataclass(frozen=True)
class Message:
    command: Command
    payload: Payload = None


@dataclass(frozen=True)
class LinkCapabilities:
    """Outcome of a VERSION exchange, as seen by the local side."""

    coinprune: bool
    remote_height: int
    remote_services: int = 0


# Payload codecs


def _encode_items(items: Sequence[InvItem]) -> bytes:
    parts = [struct.pack('<I', len(items))]
    parts.extend(struct.pack('<I', int(item.kind)) + bytes(item.hash) for item in items)
    return b''.join(parts)


def _decode_items(stream: BytesIO) -> InvPayload:
    items = []
    for _ in range(read_u32(stream)):
        kind = read_u32(stream)
        try:
            kind = InvKind(kind)
        except ValueError as e:
            raise DecodeError(f"Unknown inventory kind {kind:#x}") from e
        items.append(InvItem(kind, read_exact(stream, HASH_SIZE)))
    return InvPayload(tuple(items))


def _encode_payload(message: Message) -> bytes:
    command, payload = message.command, message.payload
    if command in (Command.VERACK, Command.GETSTATE):
        return b''
    if command is Command.VERSION:
        return _VERSION_STRUCT.pack(payload.protocol_version, payload.services, payload.best_height)
    if command in (Command.INV, Command.GETDATA):
        return _encode_items(payload.items)
    if command is Command.GETHEADERS:
        return (
            struct.pack('<I', len(payload.locator))
            + b''.join(payload.locator)
            + bytes(payload.stop)
        )
    if command is Command.HEADERS:
        return struct.pack('<I', len(payload.headers)) + b''.join(h.serialize() for h in payload.headers)
    if command is Command.BLOCK:
        return payload.serialize()
    if command is Command.STATECHUNK:
        return bytes(payload.snapshot_id) + struct.pack('<I', payload.index) + bytes(payload.data)
    raise DecodeError(f"Cannot encode command {command}")


def _decode_payload(command: Command, payload: bytes) -> Payload:
    stream = BytesIO(payload)
    if command in (Command.VERACK, Command.GETSTATE):
        result = None
    elif command is Command.VERSION:
        result = VersionPayload(*_VERSION_STRUCT.unpack(read_exact(stream, _VERSION_STRUCT.size)))
    elif command in (Command.INV, Command.GETDATA):
        result = _decode_items(stream)
    elif command is Command.GETHEADERS:
        locator = tuple(read_exact(stream, HASH_SIZE) for _ in range(read_u32(stream)))
        result = GetHeadersPayload(locator, read_exact(stream, HASH_SIZE))
    elif command is Command.HEADERS:
        count = read_u32(stream)
        if count > MAX_HEADERS_PER_MESSAGE:
            raise DecodeError(f"Too many headers: {count}")
        result = HeadersPayload(tuple(BlockHeader.read(stream) for _ in range(count)))
    elif command is Command.BLOCK:
        result = Block.read(stream)
    else:
        snapshot_id = read_exact(stream, HASH_SIZE)
        index = read_u32(stream)
        result = StateChunkPayload(snapshot_id, index, stream.read())
    if stream.read(1):
        raise DecodeError(f"Trailing bytes in {command.value} payload")
    return result


# Framing


def encode(message: Message, magic: int = DEFAULT_MAGIC) -> bytes:
    """Frame a message for the wire."""
    payload = _encode_payload(message)
    name = message.command.value.encode('ascii')
    return _FRAME_STRUCT.pack(magic, name.ljust(COMMAND_SIZE, b'\x00'), len(payload)) + payload


def decode(data: bytes, magic: int = DEFAULT_MAGIC) -> Message:
    """
    Decode one frame from untrusted bytes.

    Raises:
        DecodeError: truncation, bad magic, unknown command, length mismatch
            or a malformed payload
    """
    if len(data) < FRAME_HEADER_SIZE:
        raise DecodeError(f"Truncated frame: {len(data)} bytes")
    frame_magic, raw_command, length = _FRAME_STRUCT.unpack_from(data)
    if frame_magic != magic:
        raise DecodeError(f"Bad magic {frame_magic:#010x}")
    name = raw_command.rstrip(b'\x00')
    if b'\x00' in name:
        raise DecodeError("Command name is not zero padded")
    try:
        command = Command(name.decode('ascii'))
    except (UnicodeDecodeError, ValueError) as e:
        raise DecodeError(f"Unknown command {name!r}") from e
    if length != len(data) - FRAME_HEADER_SIZE:
        raise DecodeError(f"Length field {length} does not match payload of {len(data) - FRAME_HEADER_SIZE} bytes")
    try:
        payload = _decode_payload(command, bytes(data[FRAME_HEADER_SIZE:]))
    except ChainError as e:
        raise DecodeError(f"Malformed {command.value} payload: {e}") from e
    return Message(command, payload)


def frame_size(message: Message) -> int:
    return len(encode(message))


# CoinPrune helpers


def version_message(best_height: int, coinprune: bool) -> Message:
    services = NODE_NETWORK | (NODE_COINPRUNE if coinprune else 0)
    return Message(Command.VERSION, VersionPayload(PROTOCOL_VERSION, services, best_height))


def negotiate(local: VersionPayload, remote: VersionPayload) -> LinkCapabilities:
    """
    CoinPrune messages are allowed only when both sides set NODE_COINPRUNE.

    Raises:
        HandshakeError: remote protocol version below the minimum
    """
    if remote.protocol_version < MIN_PROTOCOL_VERSION:
        raise HandshakeError(
            f"Peer protocol version {remote.protocol_version} below minimum {MIN_PROTOCOL_VERSION}"
        )
    return LinkCapabilities(
        coinprune=local.coinprune and remote.coinprune,
        remote_height=remote.best_height,
        remote_services=remote.services,
    )


def state_inventory(snapshot: Snapshot) -> Message:
    """INV listing the snapshot header hash and chunk hashes, in order."""
    items = tuple(InvItem(InvKind.STATE_ITEM, h) for h in chunk_hashes(snapshot))
    return Message(Command.INV, InvPayload(items))


def state_chunk(snapshot: Snapshot, index: int) -> Message:
    return Message(Command.STATECHUNK, StateChunkPayload(snapshot.snapshot_id, index, snapshot.piece(index)))


def inventory_id(items: Sequence[InvItem]) -> Optional[bytes]:
    """Snapshot id implied by a STATE inventory, or None if it carries no state."""
    hashes = [item.hash for item in items if item.kind is InvKind.STATE_ITEM]
    if not hashes:
        return None
    return hash256(b''.join(hashes))


def assemble_snapshot(pieces: Dict[int, bytes]) -> Snapshot:
    """Rebuild a snapshot from STATECHUNK pieces (0 is the header)."""
    if 0 not in pieces:
        raise SnapshotError("Snapshot header piece missing")
    header = SnapshotHeader.deserialize(pieces[0])
    chunks = []
    for index in range(1, len(pieces)):
        if index not in pieces:
            raise SnapshotError(f"Snapshot chunk {index} missing")
        chunks.append(pieces[index])
    return Snapshot(header, tuple(chunks))


def block_inventory(block_ids: Sequence[bytes]) -> InvPayload:
    return InvPayload(tuple(InvItem(InvKind.BLOCK_ITEM, block_id) for block_id in block_ids))
