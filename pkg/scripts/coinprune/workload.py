"""
Scripted transaction workload for mined blocks.

Every output pays one of a fixed pool of hash-locked keys, so any miner
can spend any workload output from its own UTXO view.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .chain import OutPoint, Transaction, TxIn, TxOut, UtxoSet, hash256, make_coinbase
from .config import TX_FEE, WORKLOAD_KEYS
from .errors import ScenarioError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkloadSpec:
    txs_per_block: int = 10
    outputs_per_tx: int = 2
    spend_ratio: float = 0.5

    def __post_init__(self):
        if self.txs_per_block < 0:
            raise ScenarioError(f"txs_per_block must be >= 0, got {self.txs_per_block}")
        if self.outputs_per_tx < 1:
            raise ScenarioError(f"outputs_per_tx must be >= 1, got {self.outputs_per_tx}")
        if not 0.0 <= self.spend_ratio <= 1.0:
            raise ScenarioError(f"spend_ratio must be in [0, 1], got {self.spend_ratio}")


def workload_witness(index: int) -> bytes:
    return f"workload-key-{index:02d}".encode('ascii')


class Workload:
    """
    Builds block transactions from a miner's UTXO view.

    Each transaction spends one output, plus a second one with probability
    spend_ratio, and splits the value over outputs_per_tx outputs.
    """

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator, keys: int = WORKLOAD_KEYS):
        self.spec = spec
        self.rng = rng
        self.witnesses: Dict[bytes, bytes] = {}
        for index in range(keys):
            witness = workload_witness(index)
            self.witnesses[hash256(witness)] = witness
        self.scripts = sorted(self.witnesses)

    def pick_script(self) -> bytes:
        return self.scripts[int(self.rng.integers(len(self.scripts)))]

    def coinbase(self, height: int, value: int, coinbase_data: bytes) -> Transaction:
        return make_coinbase(height, value, self.pick_script(), coinbase_data)

    def transactions(self, utxo: UtxoSet) -> Tuple[List[Transaction], int]:
        """
        Draw this block's transactions.

        Returns:
            (transactions, total fees)
        """
        spendable = [
            (outpoint, txout) for outpoint, txout in utxo.sorted_items()
            if txout.script in self.witnesses and txout.value > TX_FEE + self.spec.outputs_per_tx
        ]
        txs: List[Transaction] = []
        fees = 0
        for _ in range(self.spec.txs_per_block):
            if not spendable:
                break
            n_inputs = 1 + int(len(spendable) > 1 and self.rng.random() < self.spec.spend_ratio)
            picked = sorted(self.rng.choice(len(spendable), size=n_inputs, replace=False).tolist(), reverse=True)
            coins = [spendable.pop(index) for index in picked]
            txs.append(self._spend(coins))
            fees += TX_FEE
        return txs, fees

    def _spend(self, coins: List[Tuple[OutPoint, TxOut]]) -> Transaction:
        inputs = tuple(TxIn(outpoint, self.witnesses[txout.script]) for outpoint, txout in coins)
        available = sum(txout.value for _, txout in coins) - TX_FEE
        count = self.spec.outputs_per_tx
        share, remainder = divmod(available, count)
        outputs = tuple(
            TxOut(share + (remainder if i == 0 else 0), self.pick_script())
            for i in range(count)
        )
        return Transaction(inputs, outputs)
