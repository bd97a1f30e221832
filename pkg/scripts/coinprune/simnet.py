"""
Deterministic discrete-event network simulator.

One seeded numpy Generator drives latency, mining, neighbor selection and
the transaction workload. Events sit in a heap ordered by (time, sequence),
so equal-time events run in scheduling order and a run is a pure function
of its scenario.
"""

import heapq
import itertools
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .chain import Block, UtxoSet, apply_block, fork_choice, hash256, make_genesis, work_from_bits
from .config import GENESIS_TIMESTAMP
from .errors import ScenarioError
from .metrics import Metrics
from .node import JoinOutcome, Misbehavior, Node
from .protocol import LinkCapabilities, Message, encode
from .reaffirm import decide, tally
from .scenario import JoinSpec, Scenario
from .snapshot import create_snapshot, serialize_utxo
from .workload import Workload

logger = logging.getLogger(__name__)

DELIVER = 'deliver'
MINE = 'mine'
TIMER = 'timer'
JOIN = 'join'


class EventQueue:
    def __init__(self):
        self._pq: List[Tuple[float, int, str, Any]] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._pq)

    def push(self, when: float, kind: str, payload: Any):
        heapq.heappush(self._pq, (when, next(self._seq), kind, payload))

    def pop(self) -> Tuple[float, str, Any]:
        when, _, kind, payload = heapq.heappop(self._pq)
        return when, kind, payload


@dataclass(frozen=True)
class MinedBlock:
    block: Block
    height: int
    cumulative_work: int
    order: int


class Network:
    """Scheduler, links and traffic accounting; the Transport every node sees."""

    def __init__(self, scenario: Scenario):
        for join in scenario.joins:
            if join.height is not None and join.height > scenario.chain_length:
                raise ScenarioError(
                    f"Join at height {join.height} is beyond chain_length {scenario.chain_length}"
                )
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.queue = EventQueue()
        self.now = 0.0
        self.events = 0
        self.genesis = make_genesis(scenario.bits, scenario.subsidy)
        self.workload = Workload(scenario.workload, self.rng)
        self.nodes: Dict[int, Node] = {}
        self.sent: Dict[int, Counter] = {}
        self.received: Dict[int, Counter] = {}
        self._last_arrival: Dict[Tuple[int, int], float] = {}
        self.registry: Dict[bytes, MinedBlock] = {
            self.genesis.block_id: MinedBlock(self.genesis, 0, work_from_bits(self.genesis.header.bits), 0)
        }
        self.mining = True
        self.pending_joins: List[JoinSpec] = []

        for node_id, spec in enumerate(scenario.nodes):
            self._add_node(node_id, spec.node_config(scenario))
        self._wire_established()

    def _add_node(self, node_id: int, config) -> Node:
        node = Node(
            node_id, config, self.genesis, self,
            subsidy=self.scenario.subsidy,
            bits=self.scenario.bits,
            max_retries=self.scenario.max_retries,
            phase_timeout=self.scenario.phase_timeout,
        )
        self.nodes[node_id] = node
        self.sent[node_id] = Counter()
        self.received[node_id] = Counter()
        return node

    def _wire_established(self):
        """Random outgoing links between established nodes, already handshaked."""
        ids = sorted(self.nodes)
        for node_id in ids:
            node = self.nodes[node_id]
            others = [peer for peer in ids if peer != node_id and peer not in node.links]
            wanted = min(node.config.neighbor_count, len(others))
            if wanted <= 0:
                continue
            for peer in sorted(self.rng.choice(others, size=wanted, replace=False).tolist()):
                self._link(node_id, peer)

    def _link(self, a: int, b: int):
        left, right = self.nodes[a], self.nodes[b]
        coinprune = left.config.coinprune and right.config.coinprune
        left.add_link(b, LinkCapabilities(coinprune, 0))
        right.add_link(a, LinkCapabilities(coinprune, 0))

    # Transport

    def send(self, src: int, dst: int, message: Message):
        size = len(encode(message, self.scenario.magic))
        self.sent[src][message.command.value] += size
        low, high = self.scenario.latency
        arrival = self.now + float(self.rng.uniform(low, high))
        # FIFO per directed link
        arrival = max(arrival, self._last_arrival.get((src, dst), 0.0))
        self._last_arrival[(src, dst)] = arrival
        self.queue.push(arrival, DELIVER, (src, dst, message, size))

    def schedule(self, delay: float, node_id: int, event):
        self.queue.push(self.now + delay, TIMER, (node_id, event))

    def disconnect(self, a: int, b: int):
        if a in self.nodes:
            self.nodes[a].drop_link(b)
        if b in self.nodes:
            self.nodes[b].drop_link(a)

    def pick_neighbors(self, node_id: int) -> List[int]:
        """
        Uniform choice among eligible established peers.

        Banned peers are never eligible; peers not tried before are
        preferred. CoinPrune joiners need CoinPrune peers, legacy joiners
        need peers holding every body. An eclipsed joiner's first set is
        adversaries only.
        """
        node = self.nodes[node_id]
        if node.config.coinprune:
            def serves(peer: Node) -> bool:
                return peer.config.coinprune
        else:
            def serves(peer: Node) -> bool:
                return peer.store.archival
        eligible = [
            peer for peer in sorted(self.nodes)
            if peer != node_id and peer not in node.banned and self.nodes[peer].established
            and serves(self.nodes[peer])
        ]
        if node.config.eclipse and node.join is None:
            eligible = [peer for peer in eligible
                        if self.nodes[peer].config.misbehavior is Misbehavior.SERVE_INVALID]
        count = node.config.neighbor_count
        fresh = [peer for peer in eligible if peer not in node.tried]
        if len(fresh) >= count:
            pool, chosen = fresh, []
        else:
            chosen = fresh
            pool = [peer for peer in eligible if peer not in fresh]
        wanted = min(count - len(chosen), len(pool))
        if wanted > 0:
            chosen = chosen + self.rng.choice(pool, size=wanted, replace=False).tolist()
        return sorted(int(peer) for peer in chosen)

    # Event loop

    @property
    def best_height(self) -> int:
        return max((node.tip_height for node in self.nodes.values() if node.established), default=0)

    def _established(self) -> List[Node]:
        return [node for node in self.nodes.values() if node.established]

    def _miners(self) -> List[Node]:
        return [
            node for node in self.nodes.values()
            if node.config.mining_power > 0 and node.established and node.join is None
        ]

    def _schedule_mining(self):
        self.queue.push(self.now + float(self.rng.exponential(self.scenario.block_interval)), MINE, None)

    def _converged(self) -> bool:
        tips = {node.tip_id for node in self._established()}
        return len(tips) == 1

    def _on_mine(self):
        if self.best_height >= self.scenario.chain_length and self._converged():
            self.mining = False
            logger.debug(f"Mining stopped at height {self.best_height}, t={self.now:.0f}")
            return
        miners = self._miners()
        if not miners:
            logger.warning(f"No live miner left at t={self.now:.0f}; mining stopped")
            self.mining = False
            return
        power = np.array([node.config.mining_power for node in miners], dtype=float)
        miner = miners[int(self.rng.choice(len(miners), p=power / power.sum()))]
        block = miner.mine_block(GENESIS_TIMESTAMP + int(self.now), self.workload)
        parent = self.registry[block.header.prev_id]
        self.registry[block.block_id] = MinedBlock(
            block,
            parent.height + 1,
            parent.cumulative_work + work_from_bits(block.header.bits),
            len(self.registry),
        )
        logger.debug(f"t={self.now:.0f} node {miner.node_id} mined height {parent.height + 1}")
        self._trigger_height_joins()
        self._schedule_mining()

    def _trigger_height_joins(self):
        height = self.best_height
        for join in list(self.pending_joins):
            if join.height is not None and height >= join.height:
                self.pending_joins.remove(join)
                self.queue.push(self.now, JOIN, join)

    def _on_join(self, join: JoinSpec):
        node_id = len(self.nodes)
        node = self._add_node(node_id, join.node_config(self.scenario))
        neighbors = self.pick_neighbors(node_id)
        logger.info(f"t={self.now:.0f} {join.kind} joiner {node_id} starts with neighbors {neighbors}")
        node.begin_join(neighbors, join.kind)

    def run(self) -> Metrics:
        self.pending_joins = [join for join in self.scenario.joins if join.height is not None]
        for join in self.scenario.joins:
            if join.time is not None:
                self.queue.push(float(join.time), JOIN, join)
        self._trigger_height_joins()
        self._schedule_mining()

        while self.queue:
            self.now, kind, payload = self.queue.pop()
            self.events += 1
            if kind == DELIVER:
                src, dst, message, size = payload
                self.received[dst][message.command.value] += size
                self.nodes[dst].receive(src, message)
            elif kind == TIMER:
                node_id, event = payload
                self.nodes[node_id].on_timer(event)
            elif kind == MINE:
                if self.mining:
                    self._on_mine()
            elif kind == JOIN:
                self._on_join(payload)

        for node in self.nodes.values():
            if node.chain:
                node.sample_storage()
        return self.collect()

    # Results

    def best_chain(self) -> List[MinedBlock]:
        """Best chain among the tips held by live nodes, by work then mining order."""
        tips = {node.tip_id for node in self.nodes.values() if node.chain and node.failure is None}
        best = fork_choice([
            (tip, self.registry[tip].cumulative_work, self.registry[tip].order) for tip in sorted(tips)
        ])
        chain = []
        entry = self.registry[best]
        while True:
            chain.append(entry)
            if entry.height == 0:
                break
            entry = self.registry[entry.block.header.prev_id]
        chain.reverse()
        return chain

    def oracle(self, chain: Sequence[MinedBlock]) -> Tuple[UtxoSet, List[Dict[str, Any]]]:
        """Replay the best chain from genesis and re-derive every closed pulse."""
        params = self.scenario.pulse
        utxo = UtxoSet()
        honest: Dict[int, bytes] = {}
        for entry in chain:
            utxo = apply_block(utxo, entry.block, entry.height, self.scenario.subsidy)
            if entry.height >= params.delta_p and entry.height % params.delta_p == 0:
                honest[entry.height] = create_snapshot(
                    utxo, entry.height, entry.block.block_id, self.scenario.chunk_limit
                ).snapshot_id

        tip = len(chain) - 1
        pulses = []
        for pulse, honest_id in sorted(honest.items()):
            if pulse + params.delta_r > tip:
                continue
            window = [(entry.height, entry.block) for entry in chain[pulse + 1:pulse + params.delta_r + 1]]
            result = tally(window, pulse, params)
            outcome = decide(result, params)
            pulses.append({
                'pulse': pulse,
                'outcome': outcome.kind.value,
                'snapshot_id': outcome.snapshot_id.hex() if outcome.snapshot_id else None,
                'honest_id': honest_id.hex(),
                'honest_markers': result.count(honest_id),
                'counts': {snapshot_id.hex(): count for snapshot_id, count in sorted(result.counts.items())},
            })
        return utxo, pulses

    def collect(self) -> Metrics:
        chain = self.best_chain()
        utxo, pulses = self.oracle(chain)
        main_ids = {entry.block.block_id for entry in chain}
        metrics = Metrics(
            run={
                'name': self.scenario.name,
                'seed': self.scenario.seed,
                'tip_height': len(chain) - 1,
                'tip_id': chain[-1].block.block_id.hex(),
                'oracle_utxo_digest': hash256(serialize_utxo(utxo)).hex(),
                'chain_bytes': sum(entry.block.size for entry in chain),
                'blocks_mined': len(self.registry) - 1,
                'stale_blocks': len(self.registry) - len(main_ids),
                'events': self.events,
                'end_time': self.now,
                'scenario': self.scenario.as_dict(),
            },
            pulses=pulses,
        )
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            role = node.initial_role.value
            for sample in node.storage_samples:
                metrics.storage.append({'node_id': node_id, 'role': role, **sample})
            metrics.traffic.append({
                'node_id': node_id,
                'sent': dict(sorted(self.sent[node_id].items())),
                'received': dict(sorted(self.received[node_id].items())),
            })
            if node.join is not None:
                record = node.join.as_dict()
                record['bytes_received'] = sum(self.received[node_id].values())
                metrics.joins.append(record)
                if node.join.outcome is JoinOutcome.FAILED:
                    metrics.failures.append({'node_id': node_id, 'error': record['aborts'][-1]
                                             if record['aborts'] else 'join failed'})
            if node.failure is not None:
                metrics.failures.append({'node_id': node_id, 'error': node.failure})
            metrics.nodes.append(node.report())
        return metrics


def run(scenario: Scenario) -> Metrics:
    """Simulate a scenario to completion."""
    logger.info(
        f"Running {scenario.name}: seed={scenario.seed}, nodes={len(scenario.nodes)}, "
        f"chain_length={scenario.chain_length}"
    )
    return Network(scenario).run()


def _run_seed(scenario: Scenario, seed: int) -> Metrics:
    return run(scenario.with_seed(seed))


def run_batch(scenario: Scenario, seeds: Sequence[int], workers: int = 1) -> List[Metrics]:
    """
    Run one simulation per seed.

    Args:
        scenario: Base scenario, its seed is replaced per run
        seeds: Seeds to run
        workers: Number of worker processes (1 runs in-process)

    Returns:
        Metrics ordered like seeds
    """
    results: Dict[int, Metrics] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(_run_seed, scenario, seed): seed for seed in seeds}
            with tqdm(total=len(futures), desc=scenario.name, ncols=80) as pbar:
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
                    pbar.update(1)
    else:
        for seed in tqdm(seeds, desc=scenario.name, ncols=80):
            results[seed] = _run_seed(scenario, seed)
    return [results[seed] for seed in seeds]
