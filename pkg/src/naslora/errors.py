"""Exception types shared across the package."""


class NasLoraError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(NasLoraError, ValueError):
    """An operand has an incompatible shape, extent, or index."""


class ValueCheckError(NasLoraError, ValueError):
    """A value violates an operation's precondition (range, stochasticity, ...)."""


class NonFiniteError(NasLoraError, FloatingPointError):
    """A NaN or Inf was supplied or detected where finite values are required."""


class TapeError(NasLoraError, RuntimeError):
    """Gradient tape misuse: empty tape, repeated backward without reset, ..."""


class ConfigError(NasLoraError, ValueError):
    """Invalid run configuration text, key, or value."""


class CheckpointError(NasLoraError, ValueError):
    """Malformed, truncated, or version-incompatible checkpoint file."""


class TrainingDiverged(NasLoraError, RuntimeError):
    """Training loss became non-finite. Carries the offending epoch."""

    def __init__(self, epoch: int, message: str):
        super().__init__(message)
        self.epoch = epoch
