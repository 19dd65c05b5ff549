"""Exception types shared across the package."""


class FedskelError(Exception):
    """Base class for all package errors."""


class DimensionError(FedskelError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(FedskelError):
    """Invalid or malformed configuration."""


class UsageError(FedskelError):
    """An API was called in a way that violates its contract."""


class TopologyError(FedskelError):
    """Skeleton graph is structurally invalid (e.g. disconnected)."""


class GraftingError(FedskelError):
    """Server and client block shapes are incompatible for grafting."""


class DataError(FedskelError):
    """Invalid data values (e.g. out-of-range labels)."""


class ProtocolError(FedskelError):
    """Federated protocol violation (key-set mismatch, isolation breach)."""


class TrainingAborted(FedskelError):
    """Training stopped because a loss component became non-finite."""

    def __init__(self, component: str, round_idx: int | None = None):
        self.component = component
        self.round_idx = round_idx
        where = f" at round {round_idx}" if round_idx is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")


class CheckpointError(FedskelError):
    """Corrupt or incompatible checkpoint file."""
