"""
Simplified Bitcoin-like chain model.

Headers, transactions and blocks serialize little-endian with fixed-width
integers and 32-bit length prefixes. Ownership is a single hash lock:
an output's script is hash256(witness).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from io import BytesIO
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .config import (
    DEFAULT_BITS,
    DEFAULT_SUBSIDY,
    GENESIS_TIMESTAMP,
    MAX_BLOCK_SIZE,
    MAX_COINBASE_DATA,
    MAX_MONEY,
    MAX_SCRIPT_SIZE,
    MAX_WITNESS_SIZE,
)
from .errors import (
    BlockValidationError,
    ChainError,
    CompactTargetError,
    DoubleSpendError,
    HeaderChainError,
    SubsidyError,
    WitnessError,
)

logger = logging.getLogger(__name__)

HEADER_SIZE = 80
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)

_HEADER_STRUCT = struct.Struct('<i32s32sIII')
_ENTRY_STRUCT = struct.Struct('<QIBH')
_OUTPUT_STRUCT = struct.Struct('<QH')


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash256(data: bytes) -> bytes:
    """SHA-256 applied twice."""
    return sha256(sha256(data))


def read_exact(stream: BytesIO, size: int) -> bytes:
    """Read exactly `size` bytes or raise ChainError."""
    data = stream.read(size)
    if len(data) != size:
        raise ChainError(f"Truncated data: wanted {size} bytes, got {len(data)}")
    return data


def read_u32(stream: BytesIO) -> int:
    return struct.unpack('<I', read_exact(stream, 4))[0]


def _check_hash(value: bytes, name: str):
    if not isinstance(value, (bytes, bytearray)) or len(value) != HASH_SIZE:
        raise ChainError(f"{name} must be {HASH_SIZE} bytes")


# Headers


@dataclass(frozen=True)
class BlockHeader:
    version: int
    prev_id: bytes
    merkle_root: bytes
    timestamp: int
    bits: int
    nonce: int

    def __post_init__(self):
        _check_hash(self.prev_id, 'prev_id')
        _check_hash(self.merkle_root, 'merkle_root')

    def serialize(self) -> bytes:
        return _HEADER_STRUCT.pack(
            self.version, bytes(self.prev_id), bytes(self.merkle_root),
            self.timestamp, self.bits, self.nonce
        )

    @classmethod
    def deserialize(cls, data: bytes) -> 'BlockHeader':
        if len(data) != HEADER_SIZE:
            raise ChainError(f"Header must be {HEADER_SIZE} bytes, got {len(data)}")
        return cls(*_HEADER_STRUCT.unpack(data))

    @classmethod
    def read(cls, stream: BytesIO) -> 'BlockHeader':
        return cls.deserialize(read_exact(stream, HEADER_SIZE))

    @cached_property
    def block_id(self) -> bytes:
        return hash256(self.serialize())

    def with_nonce(self, nonce: int) -> 'BlockHeader':
        return BlockHeader(self.version, self.prev_id, self.merkle_root, self.timestamp, self.bits, nonce)


def block_id(header: BlockHeader) -> bytes:
    """hash256 of the 80-byte header serialization."""
    return header.block_id


# Transactions


@dataclass(frozen=True, order=True)
class OutPoint:
    """Reference to a transaction output; orders by (txid bytes, vout)."""

    txid: bytes
    vout: int

    def __post_init__(self):
        _check_hash(self.txid, 'txid')

    def serialize(self) -> bytes:
        return bytes(self.txid) + struct.pack('<I', self.vout)

    @classmethod
    def read(cls, stream: BytesIO) -> 'OutPoint':
        txid = read_exact(stream, HASH_SIZE)
        return cls(txid, read_u32(stream))


@dataclass(frozen=True)
class TxOut:
    value: int
    script: bytes
    creation_height: int = 0
    is_coinbase: bool = False

    def __post_init__(self):
        if not 0 <= self.value <= MAX_MONEY:
            raise ChainError(f"Output value out of range: {self.value}")
        if len(self.script) > MAX_SCRIPT_SIZE:
            raise ChainError(f"Script too long: {len(self.script)} bytes")

    def serialize(self) -> bytes:
        """UTXO entry layout: value, creation_height, is_coinbase, script."""
        return _ENTRY_STRUCT.pack(
            self.value, self.creation_height, int(self.is_coinbase), len(self.script)
        ) + bytes(self.script)

    @classmethod
    def read(cls, stream: BytesIO) -> 'TxOut':
        value, height, coinbase, script_len = _ENTRY_STRUCT.unpack(read_exact(stream, _ENTRY_STRUCT.size))
        if coinbase not in (0, 1):
            raise ChainError(f"Invalid coinbase flag: {coinbase}")
        return cls(value, read_exact(stream, script_len), height, bool(coinbase))

    def serialize_output(self) -> bytes:
        """Transaction output layout: value and script only."""
        return _OUTPUT_STRUCT.pack(self.value, len(self.script)) + bytes(self.script)

    @classmethod
    def read_output(cls, stream: BytesIO) -> 'TxOut':
        value, script_len = _OUTPUT_STRUCT.unpack(read_exact(stream, _OUTPUT_STRUCT.size))
        return cls(value, read_exact(stream, script_len))


@dataclass(frozen=True)
class TxIn:
    prevout: OutPoint
    witness: bytes

    def __post_init__(self):
        if len(self.witness) > MAX_WITNESS_SIZE:
            raise ChainError(f"Witness too long: {len(self.witness)} bytes")

    def serialize(self) -> bytes:
        return self.prevout.serialize() + struct.pack('<H', len(self.witness)) + bytes(self.witness)

    @classmethod
    def read(cls, stream: BytesIO) -> 'TxIn':
        prevout = OutPoint.read(stream)
        (witness_len,) = struct.unpack('<H', read_exact(stream, 2))
        return cls(prevout, read_exact(stream, witness_len))


@dataclass(frozen=True)
class Transaction:
    """
    A transaction. Coinbase transactions have no inputs and carry the
    block height plus up to 100 bytes of arbitrary coinbase data.
    """

    inputs: Tuple[TxIn, ...]
    outputs: Tuple[TxOut, ...]
    coinbase_data: Optional[bytes] = None
    coinbase_height: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'inputs', tuple(self.inputs))
        object.__setattr__(self, 'outputs', tuple(self.outputs))
        if self.coinbase_data is not None:
            if self.inputs:
                raise ChainError("Coinbase transaction must have no inputs")
            if len(self.coinbase_data) > MAX_COINBASE_DATA:
                raise ChainError(f"Coinbase data too long: {len(self.coinbase_data)} bytes")
        elif not self.inputs:
            raise ChainError("Non-coinbase transaction needs at least one input")

    @property
    def is_coinbase(self) -> bool:
        return self.coinbase_data is not None

    @cached_property
    def raw(self) -> bytes:
        parts = [struct.pack('<I', len(self.inputs))]
        parts.extend(txin.serialize() for txin in self.inputs)
        parts.append(struct.pack('<I', len(self.outputs)))
        parts.extend(txout.serialize_output() for txout in self.outputs)
        if self.is_coinbase:
            parts.append(struct.pack('<IB', self.coinbase_height, len(self.coinbase_data)))
            parts.append(bytes(self.coinbase_data))
        return b''.join(parts)

    def serialize(self) -> bytes:
        return self.raw

    @cached_property
    def txid(self) -> bytes:
        return hash256(self.raw)

    @classmethod
    def read(cls, stream: BytesIO) -> 'Transaction':
        inputs = [TxIn.read(stream) for _ in range(read_u32(stream))]
        outputs = [TxOut.read_output(stream) for _ in range(read_u32(stream))]
        if inputs:
            return cls(tuple(inputs), tuple(outputs))
        height, data_len = struct.unpack('<IB', read_exact(stream, 5))
        return cls((), tuple(outputs), read_exact(stream, data_len), height)

    @classmethod
    def deserialize(cls, data: bytes) -> 'Transaction':
        stream = BytesIO(data)
        tx = cls.read(stream)
        if stream.read(1):
            raise ChainError("Trailing bytes after transaction")
        return tx


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: Tuple[Transaction, ...]

    def __post_init__(self):
        object.__setattr__(self, 'transactions', tuple(self.transactions))

    @property
    def block_id(self) -> bytes:
        return self.header.block_id

    @property
    def coinbase(self) -> Transaction:
        return self.transactions[0]

    @cached_property
    def raw(self) -> bytes:
        parts = [self.header.serialize(), struct.pack('<I', len(self.transactions))]
        parts.extend(tx.raw for tx in self.transactions)
        return b''.join(parts)

    def serialize(self) -> bytes:
        return self.raw

    @property
    def size(self) -> int:
        return len(self.raw)

    @classmethod
    def read(cls, stream: BytesIO) -> 'Block':
        header = BlockHeader.read(stream)
        txs = [Transaction.read(stream) for _ in range(read_u32(stream))]
        return cls(header, tuple(txs))

    @classmethod
    def deserialize(cls, data: bytes) -> 'Block':
        stream = BytesIO(data)
        block = cls.read(stream)
        if stream.read(1):
            raise ChainError("Trailing bytes after block")
        return block


# UTXO set


class UtxoSet:
    """Map from OutPoint to unspent TxOut; treated as immutable once built."""

    def __init__(self, entries: Optional[Dict[OutPoint, TxOut]] = None):
        self._entries: Dict[OutPoint, TxOut] = dict(entries or {})

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, outpoint: OutPoint) -> bool:
        return outpoint in self._entries

    def __eq__(self, other) -> bool:
        return isinstance(other, UtxoSet) and self._entries == other._entries

    def __repr__(self) -> str:
        return f"UtxoSet({len(self._entries)} entries)"

    def get(self, outpoint: OutPoint) -> Optional[TxOut]:
        return self._entries.get(outpoint)

    def entries(self) -> Dict[OutPoint, TxOut]:
        """Copy of the underlying map."""
        return dict(self._entries)

    def sorted_items(self) -> List[Tuple[OutPoint, TxOut]]:
        """Entries in canonical (txid, vout) order."""
        return sorted(self._entries.items(), key=lambda item: (bytes(item[0].txid), item[0].vout))

    def total_value(self) -> int:
        return sum(txout.value for txout in self._entries.values())

    def serialized_size(self) -> int:
        return sum(HASH_SIZE + 4 + _ENTRY_STRUCT.size + len(txout.script) for txout in self._entries.values())


# Merkle tree and proof of work


def merkle_root(txids: Sequence[bytes]) -> bytes:
    """Bitcoin-style Merkle root; odd levels duplicate the last node."""
    if not txids:
        raise BlockValidationError("Merkle root of an empty list is undefined")
    level = [bytes(txid) for txid in txids]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [hash256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def decode_compact(bits: int) -> int:
    """Decode a compact target; raises CompactTargetError if not 0 < T < 2^256."""
    size = bits >> 24
    word = bits & 0x007FFFFF
    if word and bits & 0x00800000:
        raise CompactTargetError(f"Negative compact target: {bits:#010x}")
    if size <= 3:
        target = word >> (8 * (3 - size))
    else:
        target = word << (8 * (size - 3))
    if target == 0:
        raise CompactTargetError(f"Zero compact target: {bits:#010x}")
    if target >= 1 << 256:
        raise CompactTargetError(f"Compact target overflows 256 bits: {bits:#010x}")
    return target


def encode_compact(target: int) -> int:
    """Encode a target in compact form (lossy below the 23-bit mantissa)."""
    if not 0 < target < 1 << 256:
        raise CompactTargetError(f"Target out of range: {target}")
    size = (target.bit_length() + 7) // 8
    if size <= 3:
        compact = target << (8 * (3 - size))
    else:
        compact = target >> (8 * (size - 3))
    if compact & 0x00800000:
        compact >>= 8
        size += 1
    return compact | (size << 24)


def work_from_target(target: int) -> int:
    return (1 << 256) // (target + 1)


def work_from_bits(bits: int) -> int:
    """Expected hashes for one block at this target: floor(2^256 / (T+1))."""
    return work_from_target(decode_compact(bits))


def check_pow(header: BlockHeader) -> bool:
    return int.from_bytes(header.block_id, 'little') <= decode_compact(header.bits)


def grind_nonce(header: BlockHeader, start: int = 0) -> BlockHeader:
    """Search nonces until the header satisfies its own target."""
    target = decode_compact(header.bits)
    nonce = start
    while nonce <= 0xFFFFFFFF:
        candidate = header.with_nonce(nonce)
        if int.from_bytes(candidate.block_id, 'little') <= target:
            return candidate
        nonce += 1
    raise ChainError("Nonce space exhausted")


def validate_header_chain(headers: Sequence[BlockHeader], genesis_id: bytes) -> int:
    """
    Validate links and proof of work of a header chain starting at genesis.

    Args:
        headers: Headers ordered by height, headers[0] is genesis
        genesis_id: The hard-coded genesis block id

    Returns:
        Cumulative work of the chain

    Raises:
        HeaderChainError: naming the offending height
    """
    if not headers:
        raise HeaderChainError(0, "empty header chain")
    if headers[0].block_id != genesis_id:
        raise HeaderChainError(0, "wrong genesis")
    total = 0
    prev_id = None
    for height, header in enumerate(headers):
        if prev_id is not None and header.prev_id != prev_id:
            raise HeaderChainError(height, "prev_id does not link to predecessor")
        try:
            if not check_pow(header):
                raise HeaderChainError(height, "block id above target")
            total += work_from_bits(header.bits)
        except CompactTargetError as e:
            raise HeaderChainError(height, str(e)) from e
        prev_id = header.block_id
    return total


def check_block(block: Block):
    """
    Structural validity: coinbase placement, Merkle root, size and PoW.

    Coinbase data content is never inspected here.
    """
    if not block.transactions:
        raise BlockValidationError("Block has no transactions")
    if not block.coinbase.is_coinbase:
        raise BlockValidationError("First transaction is not a coinbase")
    if any(tx.is_coinbase for tx in block.transactions[1:]):
        raise BlockValidationError("Coinbase transaction after position 0")
    if merkle_root([tx.txid for tx in block.transactions]) != block.header.merkle_root:
        raise BlockValidationError("Merkle root mismatch")
    if block.size > MAX_BLOCK_SIZE:
        raise BlockValidationError(f"Block too large: {block.size} bytes")
    try:
        if not check_pow(block.header):
            raise BlockValidationError("Block id above target")
    except CompactTargetError as e:
        raise BlockValidationError(str(e)) from e


def apply_block(utxo: UtxoSet, block: Block, height: int, subsidy: int = DEFAULT_SUBSIDY) -> UtxoSet:
    """
    Apply a structurally valid block to a UTXO set.

    Returns a new set; the input set is never modified.

    Raises:
        DoubleSpendError: spent outpoint missing
        WitnessError: witness does not hash to the spent script
        SubsidyError: overspending transaction or over-subsidy coinbase
        BlockValidationError: coinbase misplaced or wrong height, txid collision
    """
    if not block.transactions or not block.coinbase.is_coinbase:
        raise BlockValidationError("First transaction is not a coinbase")
    coinbase = block.coinbase
    if coinbase.coinbase_height != height:
        raise BlockValidationError(
            f"Coinbase height {coinbase.coinbase_height} does not match block height {height}"
        )

    entries = utxo.entries()
    fees = 0
    for tx in block.transactions[1:]:
        if tx.is_coinbase:
            raise BlockValidationError("Coinbase transaction after position 0")
        value_in = 0
        for txin in tx.inputs:
            coin = entries.pop(txin.prevout, None)
            if coin is None:
                raise DoubleSpendError(
                    f"Missing outpoint {txin.prevout.txid.hex()}:{txin.prevout.vout} at height {height}"
                )
            if hash256(txin.witness) != coin.script:
                raise WitnessError(f"Witness does not unlock {txin.prevout.txid.hex()}:{txin.prevout.vout}")
            value_in += coin.value
        value_out = sum(txout.value for txout in tx.outputs)
        if value_out > value_in:
            raise SubsidyError(f"Transaction {tx.txid.hex()} spends {value_out} > {value_in}")
        fees += value_in - value_out
        _add_outputs(entries, tx, height, is_coinbase=False)

    minted = sum(txout.value for txout in coinbase.outputs)
    if minted > subsidy + fees:
        raise SubsidyError(f"Coinbase pays {minted} > subsidy {subsidy} + fees {fees}")
    _add_outputs(entries, coinbase, height, is_coinbase=True)
    return UtxoSet(entries)


def _add_outputs(entries: Dict[OutPoint, TxOut], tx: Transaction, height: int, is_coinbase: bool):
    txid = tx.txid
    for vout, txout in enumerate(tx.outputs):
        outpoint = OutPoint(txid, vout)
        if outpoint in entries:
            raise BlockValidationError(f"Duplicate output {txid.hex()}:{vout}")
        entries[outpoint] = TxOut(txout.value, txout.script, height, is_coinbase)


def replay_chain(blocks: Iterable[Block], subsidy: int = DEFAULT_SUBSIDY,
                 base: Optional[UtxoSet] = None, start_height: int = 0) -> UtxoSet:
    """Apply blocks in order starting at start_height."""
    utxo = base if base is not None else UtxoSet()
    for offset, block in enumerate(blocks):
        utxo = apply_block(utxo, block, start_height + offset, subsidy)
    return utxo


def fork_choice(candidate_tips: Sequence[Tuple[bytes, int, int]]) -> bytes:
    """
    Pick the tip with most cumulative work; ties go to the earliest arrival.

    Args:
        candidate_tips: (tip id, cumulative work, arrival order) triples
    """
    if not candidate_tips:
        raise ChainError("fork_choice needs at least one candidate")
    best = min(candidate_tips, key=lambda tip: (-tip[1], tip[2]))
    return best[0]


# Block construction


def build_block(prev_id: bytes, transactions: Sequence[Transaction], timestamp: int,
                bits: int = DEFAULT_BITS, version: int = 1) -> Block:
    """Assemble a block and grind a nonce satisfying its target."""
    header = BlockHeader(
        version=version,
        prev_id=prev_id,
        merkle_root=merkle_root([tx.txid for tx in transactions]),
        timestamp=timestamp,
        bits=bits,
        nonce=0,
    )
    return Block(grind_nonce(header), tuple(transactions))


def make_coinbase(height: int, value: int, script: bytes, coinbase_data: bytes = b'') -> Transaction:
    return Transaction((), (TxOut(value, script),), coinbase_data, height)


def make_genesis(bits: int = DEFAULT_BITS, subsidy: int = DEFAULT_SUBSIDY,
                 timestamp: int = GENESIS_TIMESTAMP, script: Optional[bytes] = None) -> Block:
    """Deterministic genesis block paying the subsidy to `script`."""
    script = script if script is not None else hash256(b'coinprune-genesis')
    coinbase = make_coinbase(0, subsidy, script, b'genesis')
    return build_block(ZERO_HASH, [coinbase], timestamp, bits)


@dataclass
class ChainIndexEntry:
    """Header bookkeeping shared by nodes: height, work and arrival order."""

    header: BlockHeader
    height: int
    cumulative_work: int
    arrival: int
    children: List[bytes] = field(default_factory=list)

    @property
    def block_id(self) -> bytes:
        return self.header.block_id


def iter_ancestors(index: Dict[bytes, ChainIndexEntry], tip_id: bytes) -> Iterator[ChainIndexEntry]:
    """Walk from tip back to genesis through the header index."""
    entry = index.get(tip_id)
    while entry is not None:
        yield entry
        entry = index.get(entry.header.prev_id) if entry.height > 0 else None
