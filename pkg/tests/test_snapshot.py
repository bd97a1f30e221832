"""Tests for snapshot creation, identifiers, verification and files."""

import numpy as np
import pytest

from scripts.coinprune.chain import UtxoSet, hash256
from scripts.coinprune.errors import MalformedSnapshotError, SnapshotError, TamperError
from scripts.coinprune.snapshot import (
    Snapshot,
    SnapshotHeader,
    chunk_hashes,
    craft_invalid_snapshot,
    create_snapshot,
    decode_snapshot,
    parse_snapshot,
    parse_utxo,
    read_snapshot,
    serialize_entry,
    serialize_snapshot,
    serialize_utxo,
    snapshot_id,
    verify_and_apply,
    write_snapshot,
)

BLOCK_ID = hash256(b'pulse block')


def _flip(data: bytes, position: int) -> bytes:
    return data[:position] + bytes([data[position] ^ 0x01]) + data[position + 1:]


class TestCreate:
    def test_header_fields(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, chunk_limit=512)
        assert snapshot.header == SnapshotHeader(40, BLOCK_ID, len(snapshot.chunks))
        assert len(snapshot.header.serialize()) == 40

    def test_chunks_respect_limit_and_never_split_entries(self, sample_utxo):
        limit = 512
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, chunk_limit=limit)
        assert len(snapshot.chunks) > 1
        assert all(0 < len(chunk) <= limit for chunk in snapshot.chunks)
        assert b''.join(snapshot.chunks) == serialize_utxo(sample_utxo)
        for chunk in snapshot.chunks:
            # every chunk decodes on its own
            decode_snapshot(Snapshot(SnapshotHeader(40, BLOCK_ID, 1), (chunk,)))

    def test_entry_larger_than_limit(self, sample_utxo):
        with pytest.raises(SnapshotError):
            create_snapshot(sample_utxo, 40, BLOCK_ID, chunk_limit=16)

    def test_empty_set_has_header_only(self):
        snapshot = create_snapshot(UtxoSet(), 0, BLOCK_ID)
        assert snapshot.chunks == ()
        assert snapshot.snapshot_id == hash256(hash256(snapshot.header.serialize()))

    def test_deterministic(self, sample_utxo):
        a = create_snapshot(sample_utxo, 40, BLOCK_ID, 1024)
        b = create_snapshot(UtxoSet(sample_utxo.entries()), 40, BLOCK_ID, 1024)
        assert a.snapshot_id == b.snapshot_id


class TestIdentifier:
    def test_layered_hash(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 700)
        hashes = chunk_hashes(snapshot)
        assert len(hashes) == 1 + len(snapshot.chunks)
        assert hashes[0] == hash256(snapshot.header.serialize())
        assert snapshot_id(snapshot) == hash256(b''.join(hashes))

    def test_chunk_limit_changes_id(self, sample_utxo):
        a = create_snapshot(sample_utxo, 40, BLOCK_ID, 700)
        b = create_snapshot(sample_utxo, 40, BLOCK_ID, 1400)
        assert a.snapshot_id != b.snapshot_id

    def test_height_and_block_bind_id(self, sample_utxo):
        base = create_snapshot(sample_utxo, 40, BLOCK_ID)
        assert create_snapshot(sample_utxo, 41, BLOCK_ID).snapshot_id != base.snapshot_id
        assert create_snapshot(sample_utxo, 40, hash256(b'other')).snapshot_id != base.snapshot_id


class TestVerify:
    def test_accepts_honest_snapshot(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        assert verify_and_apply(snapshot, snapshot.snapshot_id) == sample_utxo

    def test_every_flipped_chunk_byte_detected(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        expected = snapshot.snapshot_id
        rng = np.random.default_rng(11)
        for _ in range(1000):
            index = int(rng.integers(len(snapshot.chunks)))
            chunk = snapshot.chunks[index]
            chunks = list(snapshot.chunks)
            chunks[index] = _flip(chunk, int(rng.integers(len(chunk))))
            with pytest.raises(TamperError):
                verify_and_apply(Snapshot(snapshot.header, tuple(chunks)), expected)

    @pytest.mark.slow
    def test_random_snapshots_with_one_flipped_byte(self, chain_40):
        states = chain_40[1]
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            entries = states[int(rng.integers(1, len(states)))].entries()
            kept = {outpoint: txout for outpoint, txout in entries.items() if rng.random() < 0.8}
            snapshot = create_snapshot(
                UtxoSet(kept), int(rng.integers(0, 2 ** 31)), rng.bytes(32), int(rng.integers(256, 4097)),
            )
            index = int(rng.integers(len(snapshot.chunks) + 1))
            piece = snapshot.piece(index)
            flipped = _flip(piece, int(rng.integers(len(piece))))
            if index == 0:
                tampered = Snapshot(SnapshotHeader.deserialize(flipped), snapshot.chunks)
            else:
                chunks = list(snapshot.chunks)
                chunks[index - 1] = flipped
                tampered = Snapshot(snapshot.header, tuple(chunks))
            with pytest.raises(SnapshotError):
                verify_and_apply(tampered, snapshot.snapshot_id)

    def test_flipped_header_detected(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        raw = snapshot.header.serialize()
        for position in range(len(raw)):
            header = SnapshotHeader.deserialize(_flip(raw, position))
            with pytest.raises(SnapshotError):
                verify_and_apply(Snapshot(header, snapshot.chunks), snapshot.snapshot_id)

    def test_reordered_chunks_detected(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        reordered = Snapshot(snapshot.header, snapshot.chunks[::-1])
        with pytest.raises(TamperError):
            verify_and_apply(reordered, snapshot.snapshot_id)

    def test_missing_chunk_is_malformed(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        with pytest.raises(MalformedSnapshotError):
            verify_and_apply(Snapshot(snapshot.header, snapshot.chunks[:-1]), snapshot.snapshot_id)

    def test_unordered_entries_rejected_even_with_matching_id(self, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 600)
        swapped = Snapshot(snapshot.header, snapshot.chunks[::-1])
        with pytest.raises(MalformedSnapshotError):
            verify_and_apply(swapped, swapped.snapshot_id)


class TestCraftedSnapshot:
    def test_forged_output_changes_id_and_value(self, sample_utxo):
        honest = create_snapshot(sample_utxo, 40, BLOCK_ID)
        crafted = craft_invalid_snapshot(sample_utxo, 40, BLOCK_ID, hash256(b'mallory'), 10 ** 9)
        assert crafted.snapshot_id != honest.snapshot_id
        forged = verify_and_apply(crafted, crafted.snapshot_id)
        assert len(forged) == len(sample_utxo) + 1
        assert forged.total_value() == sample_utxo.total_value() + 10 ** 9
        with pytest.raises(TamperError):
            verify_and_apply(crafted, honest.snapshot_id)


class TestFiles:
    def test_write_read_roundtrip(self, tmp_path, sample_utxo):
        snapshot = create_snapshot(sample_utxo, 40, BLOCK_ID, 800)
        path = tmp_path / 'nested' / 'state.cpsnap'
        assert write_snapshot(path, snapshot) == snapshot.snapshot_id
        assert not path.with_suffix('.tmp').exists()
        loaded = read_snapshot(path)
        assert loaded == snapshot
        assert path.stat().st_size == snapshot.file_size

    def test_truncated_file(self, sample_utxo):
        data = serialize_snapshot(create_snapshot(sample_utxo, 40, BLOCK_ID, 800))
        with pytest.raises(MalformedSnapshotError):
            parse_snapshot(data[:-3])
        with pytest.raises(MalformedSnapshotError):
            parse_snapshot(data[:20])

    def test_utxo_stream_roundtrip(self, sample_utxo):
        assert parse_utxo(serialize_utxo(sample_utxo)) == sample_utxo

    def test_utxo_stream_duplicate(self, sample_utxo):
        outpoint, txout = sample_utxo.sorted_items()[0]
        entry = serialize_entry(outpoint, txout)
        with pytest.raises(MalformedSnapshotError):
            parse_utxo(entry + entry)

    def test_utxo_stream_garbage(self):
        with pytest.raises(MalformedSnapshotError):
            parse_utxo(b'\x01' * 10)
