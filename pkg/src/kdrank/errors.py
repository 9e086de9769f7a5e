"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match."""


class ConfigError(ValueError):
    """Invalid configuration or architecture/dataset mismatch."""


class OracleError(ArithmeticError):
    """Finite-difference oracle evaluated a non-finite value."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


class StaleCacheError(RuntimeError):
    """Backward pass called with a cache from before a parameter update."""


class SweepError(RuntimeError):
    """A sweep sub-run failed; ``value`` names the failing point."""

    def __init__(self, value, cause: BaseException):
        super().__init__(f"sweep failed at value {value!r}: {cause}")
        self.value = value
        self.cause = cause
