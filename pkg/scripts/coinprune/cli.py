"""Command-line interface for CoinPrune simulations and snapshot files."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .config import DEFAULT_CHUNK_LIMIT, DEFAULT_OUTPUT_DIR, DEFAULT_SCENARIO_DIR
from .errors import ScenarioError, SnapshotError
from .logger import log_summary, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2


def hex_bytes(value: str) -> bytes:
    """argparse type for lowercase or uppercase hex strings."""
    try:
        return bytes.fromhex(value.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not valid hex: {value!r}") from e


def hash_hex(value: str) -> bytes:
    data = hex_bytes(value)
    if len(data) != 32:
        raise argparse.ArgumentTypeError(f"expected 64 hex characters, got {len(value.strip())}")
    return data


def list_presets():
    """List bundled scenario presets."""
    from .scenario import list_presets as presets

    print("Bundled scenarios:")
    print("=" * 50)
    for i, path in enumerate(presets(), 1):
        print(f"{i:2d}. {path.stem:<12} {path}")
    print("\nUsage:")
    print("  python -m scripts.coinprune run --scenario honest")


def resolve_scenario(name: str) -> Path:
    """Accept a path or the stem of a bundled preset."""
    path = Path(name)
    if path.exists():
        return path
    for suffix in ('.json', '.yaml', '.yml'):
        candidate = DEFAULT_SCENARIO_DIR / f"{name}{suffix}"
        if candidate.exists():
            return candidate
    return path


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--verbose', '-v', action='store_true', help='Verbose logging')

    parser = argparse.ArgumentParser(
        prog='python -m scripts.coinprune',
        description="Simulate CoinPrune pruning and bootstrapping; build and check snapshot files.",
        epilog="""
Examples:
  python -m scripts.coinprune --list                              # List bundled scenarios
  python -m scripts.coinprune run --scenario honest               # Honest-majority preset
  python -m scripts.coinprune run --scenario adversary --seed 7   # Override the seed
  python -m scripts.coinprune run --scenario adversary --batch 50 --workers 4
  python -m scripts.coinprune make-snapshot --utxo utxo.bin --height 128 --block-id <hex> --out s.cpsnap
  python -m scripts.coinprune verify-snapshot --in s.cpsnap --expect-id <hex>
  python -m scripts.coinprune inspect-marker --hex 436f696e5072756e652f...

Presets (data/scenarios):
  honest     12 nodes, 300 blocks, two CoinPrune joiners and one legacy joiner
  adversary  30% of mining power reaffirms an inflated snapshot
  mixed      half of the population runs legacy nodes
  tamper     two serving nodes flip bytes in served chunks
  eclipse    the first joiner only sees adversarial neighbors
  mainnet    mainnet-scale pulse parameters (YAML)

Exit status: 0 success, 1 verification failed, 2 usage or input error.
Set COINPRUNE_LOG=error|info|debug (or put it in .env) to control diagnostics.
        """,
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--list', action='store_true', help='List bundled scenarios')
    subparsers = parser.add_subparsers(dest='command', metavar='command')

    run = subparsers.add_parser('run', parents=[common], help='Run a scenario and write metrics')
    run.add_argument('--scenario', '-s', required=True, help='Scenario file or bundled preset name')
    run.add_argument('--seed', type=int, help='Override the scenario seed')
    run.add_argument('--out', '-o', type=str, default=str(DEFAULT_OUTPUT_DIR), help='Output directory')
    run.add_argument('--batch', type=int, help='Run this many consecutive seeds, one output folder each')
    run.add_argument('--workers', type=int, default=1, help='Worker processes for --batch')

    make = subparsers.add_parser('make-snapshot', parents=[common], help='Build a .cpsnap from a UTXO file')
    make.add_argument('--utxo', required=True, help='UTXO entry stream file')
    make.add_argument('--height', type=int, required=True, help='Pulse block height')
    make.add_argument('--block-id', type=hash_hex, required=True, help='Pulse block id (64 hex)')
    make.add_argument('--out', '-o', required=True, help='Snapshot file to write')
    make.add_argument('--chunk-limit', type=int, default=DEFAULT_CHUNK_LIMIT, help='Maximum chunk size in bytes')

    verify = subparsers.add_parser('verify-snapshot', parents=[common], help='Check a .cpsnap against an id')
    verify.add_argument('--in', dest='input', required=True, help='Snapshot file')
    verify.add_argument('--expect-id', type=hash_hex, required=True, help='Expected snapshot id (64 hex)')

    inspect = subparsers.add_parser('inspect-marker', parents=[common], help='Parse a reaffirmation marker')
    inspect.add_argument('--hex', dest='data', type=hex_bytes, required=True, help='Coinbase data as hex')

    return parser


def cmd_run(args) -> int:
    from .metrics import write_metrics
    from .scenario import load_scenario
    from .simnet import run, run_batch

    try:
        scenario = load_scenario(resolve_scenario(args.scenario))
    except ScenarioError as e:
        logger.error(str(e))
        return EXIT_USAGE
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    out_dir = Path(args.out)

    try:
        if args.batch:
            seeds = list(range(scenario.seed, scenario.seed + args.batch))
            for seed, metrics in zip(seeds, run_batch(scenario, seeds, args.workers)):
                write_metrics(metrics, out_dir / f"seed-{seed:04d}")
                log_summary(logger, metrics.summary())
        else:
            metrics = run(scenario)
            write_metrics(metrics, out_dir)
            log_summary(logger, metrics.summary())
    except ScenarioError as e:
        logger.error(str(e))
        return EXIT_USAGE
    return EXIT_OK


def cmd_make_snapshot(args) -> int:
    from .snapshot import create_snapshot, parse_utxo, write_snapshot

    try:
        utxo = parse_utxo(Path(args.utxo).read_bytes())
    except OSError as e:
        logger.error(f"Cannot read UTXO file: {e}")
        return EXIT_USAGE
    except SnapshotError as e:
        logger.error(f"Malformed UTXO file {args.utxo}: {e}")
        return EXIT_USAGE
    if args.height < 0 or args.chunk_limit < 1:
        logger.error("--height must be >= 0 and --chunk-limit positive")
        return EXIT_USAGE

    try:
        snapshot = create_snapshot(utxo, args.height, args.block_id, args.chunk_limit)
    except SnapshotError as e:
        logger.error(f"Cannot build snapshot: {e}")
        return EXIT_USAGE
    snapshot_id = write_snapshot(Path(args.out), snapshot)
    logger.info(f"Wrote {args.out}: {len(utxo)} entries in {len(snapshot.chunks)} chunks")
    print(snapshot_id.hex())
    return EXIT_OK


def cmd_verify_snapshot(args) -> int:
    from .snapshot import parse_snapshot, verify_and_apply

    try:
        data = Path(args.input).read_bytes()
    except OSError as e:
        logger.error(f"Cannot read snapshot file: {e}")
        return EXIT_USAGE
    try:
        utxo = verify_and_apply(parse_snapshot(data), args.expect_id)
    except SnapshotError as e:
        logger.error(f"Verification failed: {e}")
        print("FAIL")
        return EXIT_VERIFY_FAILED
    logger.info(f"Snapshot verified: {len(utxo)} entries, total value {utxo.total_value()}")
    print("OK")
    return EXIT_OK


def cmd_inspect_marker(args) -> int:
    from .reaffirm import parse_marker

    snapshot_id = parse_marker(args.data)
    print(snapshot_id.hex() if snapshot_id is not None else "none")
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'make-snapshot': cmd_make_snapshot,
    'verify-snapshot': cmd_verify_snapshot,
    'inspect-marker': cmd_inspect_marker,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the exit status."""
    load_dotenv()
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logging(getattr(args, 'verbose', False))

    if args.list:
        list_presets()
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
