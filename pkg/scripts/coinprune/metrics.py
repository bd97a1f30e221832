"""Run metrics: newline-delimited JSON records and the per-node summary CSV."""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

from .config import METRICS_FILENAME, SUMMARY_COLUMNS, SUMMARY_FILENAME

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    """
    Everything a run measured.

    storage holds every sample (node_id, role, time, height, pulse and the
    StorageReport fields); traffic holds one entry per node with bytes per
    command in each direction.
    """

    run: Dict[str, Any] = field(default_factory=dict)
    pulses: List[Dict[str, Any]] = field(default_factory=list)
    storage: List[Dict[str, Any]] = field(default_factory=list)
    traffic: List[Dict[str, Any]] = field(default_factory=list)
    joins: List[Dict[str, Any]] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)
    nodes: List[Dict[str, Any]] = field(default_factory=list)

    def records(self) -> Iterator[Dict[str, Any]]:
        yield {'type': 'run', **self.run}
        for kind, items in (
            ('pulse', self.pulses),
            ('storage', self.storage),
            ('traffic', self.traffic),
            ('join', self.joins),
            ('failure', self.failures),
            ('node', self.nodes),
        ):
            for item in items:
                yield {'type': kind, **item}

    def to_ndjson(self) -> str:
        return ''.join(json.dumps(record, sort_keys=True) + '\n' for record in self.records())

    # Lookups

    def node(self, node_id: int) -> Dict[str, Any]:
        return next(n for n in self.nodes if n['node_id'] == node_id)

    def final_storage(self, node_id: int) -> Dict[str, Any]:
        samples = [s for s in self.storage if s['node_id'] == node_id]
        return samples[-1] if samples else {}

    def join_for(self, node_id: int) -> Optional[Dict[str, Any]]:
        return next((j for j in self.joins if j['node_id'] == node_id), None)

    def traffic_totals(self, node_id: int) -> Tuple[int, int]:
        """(bytes received, bytes sent) by a node."""
        entry = next((t for t in self.traffic if t['node_id'] == node_id), None)
        if entry is None:
            return 0, 0
        return sum(entry['received'].values()), sum(entry['sent'].values())

    def summary_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for node in self.nodes:
            node_id = node['node_id']
            storage = self.final_storage(node_id)
            received, sent = self.traffic_totals(node_id)
            join = self.join_for(node_id) or {}
            rows.append({
                'node_id': node_id,
                'role': node['role'],
                'bytes_bodies': storage.get('bytes_bodies', 0),
                'bytes_metas': storage.get('bytes_metas', 0),
                'bytes_snapshot': storage.get('bytes_snapshot', 0),
                'traffic_in': received,
                'traffic_out': sent,
                'join_outcome': join.get('outcome') or '',
                'events_to_accept': '' if join.get('events_to_accept') is None else join['events_to_accept'],
            })
        return rows

    def summary(self) -> Dict[str, Any]:
        """Condensed view for log_summary."""
        return {
            'seed': self.run.get('seed'),
            'nodes': len(self.nodes),
            'tip_height': self.run.get('tip_height'),
            'pulses_accepted': sum(1 for p in self.pulses if p['outcome'] == 'accepted'),
            'pulses_total': len(self.pulses),
            'joins': [
                {
                    'node_id': j['node_id'],
                    'outcome': j['outcome'],
                    'retries': j['retries'],
                    'events_to_accept': j['events_to_accept'],
                }
                for j in self.joins
            ],
            'failures': [{'node_id': f['node_id'], 'error': f['error']} for f in self.failures],
        }


def summary_csv(metrics: Metrics) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SUMMARY_COLUMNS, lineterminator='\n')
    writer.writeheader()
    writer.writerows(metrics.summary_rows())
    return buffer.getvalue()


def _atomic_write(path: Path, text: str):
    temp_file = path.with_suffix(path.suffix + '.tmp')
    with open(temp_file, 'w', encoding='utf-8', newline='') as f:
        f.write(text)
    temp_file.replace(path)


def write_metrics(metrics: Metrics, out_dir: Path) -> Tuple[Path, Path]:
    """
    Write metrics.ndjson and summary.csv into out_dir.

    Returns:
        (ndjson path, csv path)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ndjson_path = out_dir / METRICS_FILENAME
    csv_path = out_dir / SUMMARY_FILENAME
    _atomic_write(ndjson_path, metrics.to_ndjson())
    _atomic_write(csv_path, summary_csv(metrics))
    logger.info(f"Wrote {ndjson_path} and {csv_path}")
    return ndjson_path, csv_path


def read_summary(path: Path) -> List[Dict[str, str]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def read_metrics(path: Path) -> Metrics:
    """Rebuild Metrics from a metrics.ndjson file."""
    metrics = Metrics()
    targets = {
        'pulse': metrics.pulses,
        'storage': metrics.storage,
        'traffic': metrics.traffic,
        'join': metrics.joins,
        'failure': metrics.failures,
        'node': metrics.nodes,
    }
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            kind = record.pop('type')
            if kind == 'run':
                metrics.run = record
            else:
                targets[kind].append(record)
    return metrics
