"""Exception types shared across the package."""


class DppError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DppError):
    """Invalid, unknown, or inconsistent configuration."""


class DataFormatError(DppError):
    """A dataset or checkpoint file is malformed or has the wrong version."""


class CheckpointError(DataFormatError):
    """Checkpoint file cannot be read or does not match the expected format."""


class DivergenceError(DppError):
    """Training produced non-finite values."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class OracleCapError(DppError):
    """Exhaustive oracle would exceed the configured enumeration cap."""

    def __init__(self, message, required_cap):
        super().__init__(message)
        self.required_cap = required_cap
