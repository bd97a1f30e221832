"""Logging setup for CoinPrune runs."""

import logging
import os
import sys
from typing import Any, Dict, Optional

from .config import DEFAULT_LOG_LEVEL, LOG_ENV_VAR, LOG_LEVELS

LOGGER_NAME = "scripts.coinprune"

_LEVELS = {
    'error': logging.ERROR,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}


def resolve_level(verbose: bool = False, env_value: Optional[str] = None) -> int:
    """
    Resolve the log level from the verbose flag and COINPRUNE_LOG.

    Args:
        verbose: If True, always DEBUG
        env_value: Explicit value; defaults to the environment variable

    Returns:
        A logging level constant
    """
    if verbose:
        return logging.DEBUG
    value = env_value if env_value is not None else os.getenv(LOG_ENV_VAR, DEFAULT_LOG_LEVEL)
    value = value.strip().lower()
    if value not in LOG_LEVELS:
        logging.getLogger(LOGGER_NAME).warning(
            f"Unknown {LOG_ENV_VAR}={value!r}, using {DEFAULT_LOG_LEVEL}"
        )
        value = DEFAULT_LOG_LEVEL
    return _LEVELS[value]


def setup_logging(verbose: bool = False) -> logging.Logger:
    """
    Setup logging configuration.

    Diagnostics go to standard error so that data output on standard
    output stays clean.

    Args:
        verbose: If True, show DEBUG messages

    Returns:
        Configured package logger
    """
    logger = logging.getLogger(LOGGER_NAME)

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    level = resolve_level(verbose)
    logger.setLevel(level)
    handler.setLevel(level)

    formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%H:%M:%S'
    )
    handler.setFormatter(formatter)

    logger.addHandler(handler)
    logger.propagate = False

    return logger


def log_summary(logger: logging.Logger, summary: Dict[str, Any]):
    """
    Log a summary of a simulation run.

    Args:
        logger: Logger instance
        summary: Output of Metrics.summary()
    """
    logger.info("")
    logger.info("=" * 60)
    logger.info("RUN SUMMARY")
    logger.info("=" * 60)
    logger.info(f"Seed:             {summary['seed']}")
    logger.info(f"Nodes:            {summary['nodes']}")
    logger.info(f"Tip height:       {summary['tip_height']}")
    logger.info(f"Pulses accepted:  {summary['pulses_accepted']}/{summary['pulses_total']}")
    for join in summary['joins']:
        logger.info(
            f"Join {join['node_id']}: {join['outcome']} "
            f"(retries={join['retries']}, events={join['events_to_accept']})"
        )
    if summary['failures']:
        logger.warning(f"Node failures:    {len(summary['failures'])}")
        for failure in summary['failures']:
            logger.warning(f"  node {failure['node_id']}: {failure['error']}")
    logger.info("=" * 60)
