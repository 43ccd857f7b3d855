"""
Home to the exceptions raised by legnav.

Every error maps onto one of the CLI exit codes:
    1 configuration error, 2 runtime abort, 3 I/O error.
"""
from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


class LegnavError(Exception):
    """
    Base class for all legnav errors.
    """

    exit_code = EXIT_RUNTIME


class ConfigError(LegnavError, ValueError):
    """
    Raised when a configuration field is missing or out of range.
    """

    exit_code = EXIT_CONFIG

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteError(LegnavError, ValueError):
    """
    Raised when an input that must be finite contains NaN or inf.
    """


class SimulationDivergedError(LegnavError, FloatingPointError):
    """
    Raised when the physics step produces a non-finite state.
    """

    def __init__(self, robot_index: int, field: str) -> None:
        self.robot_index = robot_index
        self.field = field
        super().__init__(f"non-finite {field} for robot {robot_index}")


class SamplingExhaustedError(LegnavError, RuntimeError):
    """
    Raised when no valid target could be sampled around a spawn point.
    """

    def __init__(self, cell, attempts: int) -> None:
        self.cell = cell
        self.attempts = attempts
        super().__init__(
            f"no valid target after {attempts} consecutive samples around terrain cell {cell}"
        )


class TrainingDivergedError(LegnavError, FloatingPointError):
    """
    Raised when a PPO loss becomes non-finite.
    """

    def __init__(
        self, iteration: int, minibatch: int, max_abs_advantage: float
    ) -> None:
        self.iteration = iteration
        self.minibatch = minibatch
        self.max_abs_advantage = max_abs_advantage
        super().__init__(
            f"non-finite loss at iteration {iteration}, minibatch {minibatch} "
            f"(max |advantage| {max_abs_advantage:.6g})"
        )


class CheckpointError(LegnavError, OSError):
    """
    Base class for checkpoint load failures.
    """

    exit_code = EXIT_IO
    code = "checkpoint"

    def __init__(self, path: Optional[str], message: str) -> None:
        self.path = path
        super().__init__(f"[{self.code}] {path}: {message}")


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointShapeError(CheckpointError):
    code = "shape"
