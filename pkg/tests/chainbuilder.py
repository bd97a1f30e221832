"""Builds valid test chains with a scripted workload."""

from typing import Callable, List, Optional, Tuple

import numpy as np

from scripts.coinprune.chain import Block, UtxoSet, apply_block, build_block, make_genesis
from scripts.coinprune.config import DEFAULT_SUBSIDY, GENESIS_TIMESTAMP
from scripts.coinprune.workload import Workload, WorkloadSpec


def grow_chain(length: int, seed: int = 0, txs_per_block: int = 4,
               markers: Optional[Callable[[int], bytes]] = None) -> Tuple[List[Block], List[UtxoSet]]:
    """
    Build a valid chain with a scripted workload.

    Args:
        length: Number of blocks after genesis
        seed: Workload seed
        txs_per_block: Transactions per block
        markers: Optional callable height -> coinbase data

    Returns:
        (blocks including genesis, UTXO set after each block)
    """
    genesis = make_genesis()
    workload = Workload(WorkloadSpec(txs_per_block, 2, 0.5), np.random.default_rng(seed))
    blocks = [genesis]
    states = [apply_block(UtxoSet(), genesis, 0)]
    for height in range(1, length + 1):
        utxo = states[-1]
        txs, fees = workload.transactions(utxo)
        data = markers(height) if markers else b''
        coinbase = workload.coinbase(height, DEFAULT_SUBSIDY + fees, data)
        block = build_block(blocks[-1].block_id, [coinbase] + txs, GENESIS_TIMESTAMP + 600 * height)
        blocks.append(block)
        states.append(apply_block(utxo, block, height))
    return blocks, states
