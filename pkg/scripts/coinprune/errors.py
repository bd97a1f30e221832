"""Exception hierarchy for CoinPrune."""


class CoinPruneError(ValueError):
    """Base class for every error raised by this package."""


# Chain


class ChainError(CoinPruneError):
    """Invalid chain data."""


class CompactTargetError(ChainError):
    """Malformed compact difficulty encoding."""


class HeaderChainError(ChainError):
    """Header chain validation failed at a specific height."""

    def __init__(self, height: int, reason: str):
        super().__init__(f"Header chain invalid at height {height}: {reason}")
        self.height = height
        self.reason = reason


class BlockValidationError(ChainError):
    """Block is structurally invalid."""


class DoubleSpendError(ChainError):
    """Block spends an outpoint that is not in the UTXO set."""


class WitnessError(ChainError):
    """Witness does not unlock the spent output."""


class SubsidyError(ChainError):
    """Coinbase claims more than subsidy plus fees, or a transaction overspends."""


# Snapshot


class SnapshotError(CoinPruneError):
    """Snapshot could not be verified or decoded."""


class TamperError(SnapshotError):
    """Snapshot content does not hash to the expected identifier."""


class MalformedSnapshotError(SnapshotError):
    """Snapshot structure violates ordering, uniqueness or chunk count."""


# Store


class StoreError(CoinPruneError):
    """Node store operation refused."""


class NonContiguousHeightError(StoreError):
    """Block recorded at a height other than tip + 1."""


class PruneRefusedError(StoreError):
    """Pruning would remove bodies a joining node still needs."""


class FatalReorgError(StoreError):
    """Reorganization reaches below the pruned range."""


# Protocol


class ProtocolError(CoinPruneError):
    """Wire protocol violation."""


class DecodeError(ProtocolError):
    """Bytes do not decode to a valid message."""


class HandshakeError(ProtocolError):
    """Peer handshake failed; the link must be dropped."""


# Scenario


class ScenarioError(CoinPruneError):
    """Scenario file is missing, unparsable or invalid."""
