"""Tests for the chain model: serialization, PoW, validation and replay."""

import pytest

from scripts.coinprune.chain import (
    Block,
    BlockHeader,
    ChainIndexEntry,
    OutPoint,
    Transaction,
    TxIn,
    TxOut,
    UtxoSet,
    ZERO_HASH,
    apply_block,
    build_block,
    check_block,
    check_pow,
    decode_compact,
    encode_compact,
    fork_choice,
    hash256,
    iter_ancestors,
    make_coinbase,
    merkle_root,
    replay_chain,
    validate_header_chain,
    work_from_bits,
)
from scripts.coinprune.config import DEFAULT_BITS, DEFAULT_SUBSIDY, MAX_COINBASE_DATA
from scripts.coinprune.errors import (
    BlockValidationError,
    ChainError,
    CompactTargetError,
    DoubleSpendError,
    HeaderChainError,
    SubsidyError,
    WitnessError,
)

from chainbuilder import grow_chain

OWNER_WITNESS = b'alice'
OWNER = hash256(OWNER_WITNESS)


def _funded_genesis_state(genesis):
    return apply_block(UtxoSet(), genesis, 0)


def _spend_genesis(genesis, witness=OWNER_WITNESS, value=DEFAULT_SUBSIDY - 1000):
    coinbase = genesis.coinbase
    return Transaction((TxIn(OutPoint(coinbase.txid, 0), witness),), (TxOut(value, OWNER),))


class TestSerialization:
    def test_header_is_80_bytes_and_roundtrips(self, genesis):
        raw = genesis.header.serialize()
        assert len(raw) == 80
        assert BlockHeader.deserialize(raw) == genesis.header

    def test_block_roundtrip_keeps_id(self, chain_40):
        block = chain_40[0][17]
        copy = Block.deserialize(block.serialize())
        assert copy == block
        assert copy.block_id == block.block_id

    def test_coinbase_height_changes_txid(self):
        a = make_coinbase(1, 50, OWNER)
        b = make_coinbase(2, 50, OWNER)
        assert a.txid != b.txid

    def test_coinbase_data_limit(self):
        with pytest.raises(ChainError):
            make_coinbase(1, 50, OWNER, b'x' * (MAX_COINBASE_DATA + 1))

    def test_trailing_bytes_rejected(self, genesis):
        with pytest.raises(ChainError):
            Block.deserialize(genesis.serialize() + b'\x00')


class TestProofOfWork:
    def test_compact_roundtrip_bitcoin_genesis_bits(self):
        target = decode_compact(0x1D00FFFF)
        assert target == 0xFFFF << 208
        assert encode_compact(target) == 0x1D00FFFF

    def test_regtest_bits_work(self):
        assert work_from_bits(DEFAULT_BITS) == 2

    @pytest.mark.parametrize("bits", [0x00000000, 0x01800001, 0x21FFFFFF, 0xFF123456])
    def test_bad_compact_targets(self, bits):
        with pytest.raises(CompactTargetError):
            decode_compact(bits)

    def test_genesis_satisfies_target(self, genesis):
        check_block(genesis)


class TestMerkle:
    def test_single_leaf_is_itself(self):
        leaf = hash256(b'tx')
        assert merkle_root([leaf]) == leaf

    def test_odd_level_duplicates_last(self):
        a, b, c = (hash256(bytes([i])) for i in range(3))
        expected = hash256(hash256(a + b) + hash256(c + c))
        assert merkle_root([a, b, c]) == expected


class TestHeaderChain:
    def test_valid_chain_accumulates_work(self, chain_40):
        blocks = chain_40[0]
        headers = [b.header for b in blocks]
        assert validate_header_chain(headers, blocks[0].block_id) == 2 * len(headers)

    def test_broken_link_names_height(self, chain_40):
        headers = [b.header for b in chain_40[0]]
        headers[5], headers[6] = headers[6], headers[5]
        with pytest.raises(HeaderChainError) as exc_info:
            validate_header_chain(headers, headers[0].block_id)
        assert exc_info.value.height == 5

    def test_wrong_genesis(self, chain_40):
        headers = [b.header for b in chain_40[0]]
        with pytest.raises(HeaderChainError) as exc_info:
            validate_header_chain(headers, hash256(b'other'))
        assert exc_info.value.height == 0

    def test_header_above_target(self, chain_40):
        headers = [b.header for b in chain_40[0]]
        nonce = headers[-1].nonce
        while check_pow(headers[-1].with_nonce(nonce)):
            nonce += 1
        headers[-1] = headers[-1].with_nonce(nonce)
        with pytest.raises(HeaderChainError, match='above target') as exc_info:
            validate_header_chain(headers, headers[0].block_id)
        assert exc_info.value.height == len(headers) - 1

    def test_every_prefix_validates_with_growing_work(self, chain_40):
        headers = [b.header for b in chain_40[0]]
        works = [validate_header_chain(headers[:n], headers[0].block_id) for n in range(1, len(headers) + 1)]
        assert all(later > earlier for earlier, later in zip(works, works[1:]))


class TestBlockRules:
    def test_merkle_mismatch(self, genesis):
        header = genesis.header
        tampered = Block(
            BlockHeader(header.version, header.prev_id, hash256(b'x'), header.timestamp, header.bits, header.nonce),
            genesis.transactions,
        )
        with pytest.raises(BlockValidationError):
            check_block(tampered)

    def test_marker_content_never_rejected(self, genesis):
        coinbase = make_coinbase(1, DEFAULT_SUBSIDY, OWNER, b'CoinPrune/zz-not-hex/')
        block = build_block(genesis.block_id, [coinbase], 1)
        check_block(block)
        apply_block(_funded_genesis_state(genesis), block, 1)

    def test_spend_moves_value(self, genesis):
        utxo = _funded_genesis_state(genesis)
        genesis_owner = genesis.coinbase.outputs[0].script
        tx = Transaction(
            (TxIn(OutPoint(genesis.coinbase.txid, 0), b'coinprune-genesis'),),
            (TxOut(DEFAULT_SUBSIDY - 1000, OWNER),),
        )
        assert hash256(b'coinprune-genesis') == genesis_owner
        coinbase = make_coinbase(1, DEFAULT_SUBSIDY + 1000, OWNER)
        block = build_block(genesis.block_id, [coinbase, tx], 1)
        after = apply_block(utxo, block, 1)
        assert OutPoint(genesis.coinbase.txid, 0) not in after
        assert after.total_value() == 2 * DEFAULT_SUBSIDY
        assert after.get(OutPoint(tx.txid, 0)).creation_height == 1
        # input set untouched
        assert OutPoint(genesis.coinbase.txid, 0) in utxo

    def test_double_spend(self, genesis):
        utxo = _funded_genesis_state(genesis)
        tx = _spend_genesis(genesis, witness=b'coinprune-genesis')
        block = build_block(genesis.block_id, [make_coinbase(1, DEFAULT_SUBSIDY, OWNER), tx, tx], 1)
        with pytest.raises(DoubleSpendError):
            apply_block(utxo, block, 1)

    def test_wrong_witness(self, genesis):
        tx = _spend_genesis(genesis, witness=b'mallory')
        block = build_block(genesis.block_id, [make_coinbase(1, DEFAULT_SUBSIDY, OWNER), tx], 1)
        with pytest.raises(WitnessError):
            apply_block(_funded_genesis_state(genesis), block, 1)

    def test_coinbase_overpays(self, genesis):
        block = build_block(genesis.block_id, [make_coinbase(1, DEFAULT_SUBSIDY + 1, OWNER)], 1)
        with pytest.raises(SubsidyError):
            apply_block(_funded_genesis_state(genesis), block, 1)

    def test_coinbase_height_checked(self, genesis):
        block = build_block(genesis.block_id, [make_coinbase(2, DEFAULT_SUBSIDY, OWNER)], 1)
        with pytest.raises(BlockValidationError):
            apply_block(_funded_genesis_state(genesis), block, 1)


class TestReplay:
    def test_replay_matches_stepwise_states(self, chain_40):
        blocks, states = chain_40
        assert replay_chain(blocks) == states[-1]

    def test_replay_from_midpoint(self, chain_40):
        blocks, states = chain_40
        assert replay_chain(blocks[21:], base=states[20], start_height=21) == states[-1]

    def test_workload_spends_something(self, chain_40):
        blocks, _ = chain_40
        assert sum(len(b.transactions) - 1 for b in blocks) > 40


class TestForkChoice:
    def test_most_work_wins(self):
        assert fork_choice([(b'a', 10, 0), (b'b', 12, 1)]) == b'b'

    def test_tie_goes_to_first_arrival(self):
        assert fork_choice([(b'a', 10, 5), (b'b', 10, 2)]) == b'b'

    def test_empty(self):
        with pytest.raises(ChainError):
            fork_choice([])

    def test_iter_ancestors_walks_to_genesis(self):
        blocks, _ = grow_chain(5, seed=1, txs_per_block=0)
        index = {}
        for height, block in enumerate(blocks):
            index[block.block_id] = ChainIndexEntry(block.header, height, 2 * (height + 1), height)
        heights = [entry.height for entry in iter_ancestors(index, blocks[-1].block_id)]
        assert heights == [5, 4, 3, 2, 1, 0]
        assert blocks[0].header.prev_id == ZERO_HASH
