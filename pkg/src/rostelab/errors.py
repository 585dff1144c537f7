"""Exception hierarchy shared across the lab."""


class RosteLabError(Exception):
    """Base class for all rostelab errors."""


class ShapeError(RosteLabError):
    """Operand dimensions are incompatible."""


class DomainError(RosteLabError):
    """Input values outside the operation's domain (NaN/Inf, bad range)."""


class UnsupportedDimensionError(RosteLabError):
    """Hadamard rotation requested for a non-power-of-two dimension."""


class UsageError(RosteLabError):
    """API misuse: stale tape, empty calibration set, mismatched run inputs."""


class ConfigError(RosteLabError):
    """Invalid experiment configuration."""


class DivergenceError(RosteLabError):
    """Training diverged (non-finite or exploding loss)."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
