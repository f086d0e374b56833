"""Exception types raised across the package."""
from __future__ import annotations


class DoseDRError(Exception):
    """Base class for all package errors."""


class DataError(DoseDRError, ValueError):
    """Malformed or inconsistent input data.

    ``row`` and ``column`` are set when the problem is tied to one cell
    (``row`` counts data rows from 1, excluding the header).
    """

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class FitError(DoseDRError, RuntimeError):
    """A nuisance model could not be fit."""


class DegenerateWindowError(DoseDRError, ArithmeticError):
    """Fewer than two distinct kernel-weighted points at an evaluation point."""


class BandwidthSelectionError(DoseDRError, RuntimeError):
    """No bandwidth candidate was feasible."""


class ConfigError(DoseDRError, ValueError):
    """Unknown or invalid configuration key/value."""


class SimulationError(DoseDRError, RuntimeError):
    """Too many Monte Carlo replications failed."""
