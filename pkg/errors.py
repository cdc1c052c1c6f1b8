"""
Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes:
NumericalError -> 3, ConfigError -> 2, DataError -> 4.
"""
from typing import Optional


class StableRomError(Exception):
    """Base class for all errors raised by this package."""


class NumericalError(StableRomError, ArithmeticError):
    """A numerical computation failed or produced unusable values."""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        base = super().__str__()
        return f"[{self.stage}] {base}" if self.stage else base


class SingularMatrixError(NumericalError):
    """Raised when a matrix is singular or numerically rank-deficient."""

    def __init__(self, message: str, cond: float = float("inf")):
        super().__init__(f"{message} (estimated condition number {cond:.3e})")
        self.cond = cond


class SvdConvergenceError(NumericalError):
    pass


class RetractionError(NumericalError):
    """The QR factor of a retracted frame lost rank."""


class BlowUpError(NumericalError):
    """Non-finite (or out-of-bound) state encountered during time integration."""

    def __init__(self, time: float, index: Optional[int] = None):
        where = f" in trajectory {index}" if index is not None else ""
        super().__init__(f"integration blew up at t={time:.6g}{where}")
        self.time = time
        self.index = index


class PenaltyOverflowError(NumericalError):
    def __init__(self, abscissa: float):
        super().__init__(
            f"matrix exponential overflowed in stability penalty "
            f"(spectral abscissa {abscissa:.6g})"
        )
        self.abscissa = abscissa


class RankDeficientError(NumericalError):
    def __init__(self, message: str, rank: int):
        super().__init__(f"{message} (numerical rank {rank})")
        self.rank = rank


class ConfigError(StableRomError, ValueError):
    """Invalid run configuration; the message names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(StableRomError, ValueError):
    """Missing or inconsistent data on disk or in memory."""


class DatasetSchemaError(DataError):
    def __init__(self, path: str, field: str, line: Optional[int] = None, detail: str = ""):
        where = f" (line {line})" if line is not None else ""
        msg = f"{path}: bad field '{field}'{where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.path = path
        self.field = field
        self.line = line
