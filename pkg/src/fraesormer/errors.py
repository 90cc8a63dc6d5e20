"""Exception hierarchy.

Contract and configuration problems map to CLI exit code 1; I/O and
corruption problems map to exit code 2 (see ``EXIT_CODES`` in ``cli``).
"""


class FraesormerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FraesormerError, ValueError):
    pass


class DimensionError(FraesormerError, ValueError):
    pass


class ContractError(FraesormerError, ValueError):
    pass


class DegenerateRowError(ContractError):
    """A softmax row had no finite entry."""


class NonFiniteError(FraesormerError, FloatingPointError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class EmptyDatasetError(ContractError):
    pass


class CheckpointError(FraesormerError):
    pass


class CorruptionError(CheckpointError):
    pass


class CompatibilityError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass
