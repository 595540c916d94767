"""Exception types raised across the package."""


class DecompositionError(Exception):
    """Base class for package errors."""


class InvalidPosteriorError(DecompositionError, ValueError):
    """A posterior parameter violates its invariants (shape, sign, finiteness)."""


class DegenerateVarianceError(DecompositionError, ValueError):
    pass


class SolverDivergedError(DecompositionError, RuntimeError):
    pass


class TrainingDivergedError(DecompositionError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(DecompositionError, IOError):
    """The checkpoint file is truncated, corrupt or not a checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


class ConfigError(DecompositionError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
