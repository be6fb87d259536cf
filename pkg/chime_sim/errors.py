from __future__ import annotations


class ChimeError(Exception):
    """Base class for every error raised by the simulator."""

    exit_code = 1


class ConfigError(ChimeError, ValueError):
    exit_code = 2


class MissingFileError(ChimeError, FileNotFoundError):
    exit_code = 3


class CapacityError(ChimeError):
    exit_code = 4

    def __init__(self, message: str, overflow_bytes: int = 0) -> None:
        super().__init__(message)
        self.overflow_bytes = overflow_bytes


class MappingError(ChimeError):
    exit_code = 5


class SimulationError(ChimeError):
    exit_code = 6


class NumericalError(ChimeError, ArithmeticError):
    exit_code = 6


class BaselineError(ChimeError, KeyError):
    exit_code = 7

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class EmptySweepError(ChimeError):
    exit_code = 8


EXIT_CODES = {
    "ok": 0,
    "config": ConfigError.exit_code,
    "missing-file": MissingFileError.exit_code,
    "capacity": CapacityError.exit_code,
    "mapping": MappingError.exit_code,
    "simulation": SimulationError.exit_code,
    "baseline": BaselineError.exit_code,
    "empty": EmptySweepError.exit_code,
}
