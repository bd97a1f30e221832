"""Tests for the wire codec, handshake negotiation and state transfer messages."""

import struct

import pytest

from scripts.coinprune.chain import Block, BlockHeader, Transaction, TxOut
from scripts.coinprune.config import DEFAULT_MAGIC, NODE_COINPRUNE, NODE_NETWORK
from scripts.coinprune.errors import DecodeError, HandshakeError, SnapshotError
from scripts.coinprune.protocol import (
    Command,
    GetHeadersPayload,
    HeadersPayload,
    InvItem,
    InvKind,
    InvPayload,
    Message,
    StateChunkPayload,
    VersionPayload,
    assemble_snapshot,
    block_inventory,
    decode,
    encode,
    frame_size,
    inventory_id,
    negotiate,
    state_chunk,
    state_inventory,
    version_message,
)
from scripts.coinprune.snapshot import create_snapshot, verify_and_apply

HEADER = BlockHeader(1, b'\x55' * 32, b'\x66' * 32, 1231006505, 0x207FFFFF, 7)
COINBASE = Transaction((), (TxOut(50, b'\xaa\xbb'),), b'hi', 5)

GOLDEN = {
    'verack': Message(Command.VERACK),
    'getstate': Message(Command.GETSTATE),
    'version': Message(Command.VERSION, VersionPayload(70016, NODE_NETWORK | NODE_COINPRUNE, 300)),
    'inv': Message(Command.INV, InvPayload((InvItem(InvKind.STATE_ITEM, b'\x11' * 32),))),
    'getdata': Message(Command.GETDATA, InvPayload((InvItem(InvKind.BLOCK_ITEM, b'\x22' * 32),))),
    'getheaders': Message(Command.GETHEADERS, GetHeadersPayload((b'\x33' * 32,))),
    'headers': Message(Command.HEADERS, HeadersPayload((HEADER,))),
    'statechunk': Message(Command.STATECHUNK, StateChunkPayload(b'\x44' * 32, 3, b'abc')),
    'block': Message(Command.BLOCK, Block(HEADER, (COINBASE,))),
}

SIZES = {
    'verack': 20, 'getstate': 20, 'version': 36, 'inv': 60, 'getdata': 60,
    'getheaders': 88, 'headers': 104, 'statechunk': 59, 'block': 131,
}


def _frame(command: bytes, payload: bytes, magic: int = DEFAULT_MAGIC, length=None) -> bytes:
    length = len(payload) if length is None else length
    return struct.pack('<I12sI', magic, command.ljust(12, b'\x00'), length) + payload


class TestGoldenFrames:
    @pytest.mark.parametrize("name", sorted(GOLDEN))
    def test_decode_fixture(self, wire_hex, name):
        data = wire_hex(name)
        assert len(data) == SIZES[name]
        assert decode(data) == GOLDEN[name]

    @pytest.mark.parametrize("name", sorted(GOLDEN))
    def test_encode_matches_fixture(self, wire_hex, name):
        assert encode(GOLDEN[name]) == wire_hex(name)
        assert frame_size(GOLDEN[name]) == SIZES[name]


class TestDecodeErrors:
    def test_truncated_frame(self, wire_hex):
        with pytest.raises(DecodeError):
            decode(wire_hex('version')[:19])

    def test_bad_magic(self, wire_hex):
        with pytest.raises(DecodeError):
            decode(wire_hex('verack'), magic=0xD9B4BEF9)

    def test_unknown_command(self):
        with pytest.raises(DecodeError):
            decode(_frame(b'mempool', b''))

    def test_command_not_zero_padded(self):
        with pytest.raises(DecodeError):
            decode(_frame(b'inv\x00x', b''))

    def test_length_mismatch(self, wire_hex):
        data = wire_hex('statechunk')
        with pytest.raises(DecodeError):
            decode(data + b'\x00')
        with pytest.raises(DecodeError):
            decode(data[:-1])

    def test_trailing_payload_bytes(self):
        payload = struct.pack('<IQI', 70016, 1, 0) + b'\x00'
        with pytest.raises(DecodeError):
            decode(_frame(b'version', payload))

    def test_unknown_inventory_kind(self):
        payload = struct.pack('<II', 1, 7) + b'\x00' * 32
        with pytest.raises(DecodeError):
            decode(_frame(b'inv', payload))

    def test_truncated_block_payload(self, wire_hex):
        data = wire_hex('block')
        body = data[20:-1]
        with pytest.raises(DecodeError):
            decode(_frame(b'block', body))

    def test_too_many_headers(self):
        with pytest.raises(DecodeError):
            decode(_frame(b'headers', struct.pack('<I', 2001)))

    def test_statechunk_shorter_than_id(self):
        with pytest.raises(DecodeError):
            decode(_frame(b'statechunk', b'\x00' * 10))


class TestHandshake:
    def test_both_coinprune(self):
        local = version_message(10, coinprune=True).payload
        remote = version_message(20, coinprune=True).payload
        caps = negotiate(local, remote)
        assert caps.coinprune
        assert caps.remote_height == 20

    @pytest.mark.parametrize("local_cp,remote_cp", [(True, False), (False, True), (False, False)])
    def test_coinprune_needs_both_sides(self, local_cp, remote_cp):
        local = version_message(0, local_cp).payload
        remote = version_message(0, remote_cp).payload
        assert not negotiate(local, remote).coinprune

    def test_old_peer_rejected(self):
        with pytest.raises(HandshakeError):
            negotiate(VersionPayload(), VersionPayload(protocol_version=60000))


class TestStateTransfer:
    def test_inventory_commits_to_id(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, b'\x01' * 32, 700)
        inv = decode(encode(state_inventory(snapshot)))
        assert inv.command is Command.INV
        assert len(inv.payload.items) == len(snapshot.chunks) + 1
        assert inventory_id(inv.payload.items) == snapshot.snapshot_id

    def test_block_items_carry_no_state(self):
        assert inventory_id(block_inventory([b'\x01' * 32]).items) is None

    def test_pieces_reassemble_and_verify(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, b'\x01' * 32, 700)
        inv = state_inventory(snapshot)
        getdata = Message(Command.GETDATA, InvPayload(inv.payload.items))
        pieces = {}
        for index, _ in enumerate(decode(encode(getdata)).payload.items):
            reply = decode(encode(state_chunk(snapshot, index)))
            assert reply.payload.snapshot_id == snapshot.snapshot_id
            pieces[reply.payload.index] = reply.payload.data
        rebuilt = assemble_snapshot(pieces)
        assert verify_and_apply(rebuilt, inventory_id(inv.payload.items)) == sample_utxo

    def test_missing_piece(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, b'\x01' * 32, 700)
        pieces = {i: snapshot.piece(i) for i in range(len(snapshot.chunks) + 1)}
        del pieces[2]
        pieces[len(snapshot.chunks) + 1] = b'extra'
        with pytest.raises(SnapshotError):
            assemble_snapshot(pieces)
        with pytest.raises(SnapshotError):
            assemble_snapshot({1: snapshot.piece(1)})
