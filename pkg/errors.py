"""
Exception hierarchy shared by every stage of the pipeline.

Library code raises these and lets them propagate; only main.py turns them into
log lines and process exit codes (see `exit_code`).
"""

from __future__ import annotations


class DvaeError(Exception):
    """Base class for all errors raised by this project."""

    exit_code = 1


class ConfigurationError(DvaeError, ValueError):
    """Shapes, column maps, model kinds or generator parameters don't fit together."""

    exit_code = 2


class UsageError(DvaeError, RuntimeError):
    """An API was called out of order or with incompatible arguments."""

    exit_code = 2


class DataError(DvaeError, ValueError):
    """Input data is unusable (non-finite values, missing frames, nothing left to process)."""

    exit_code = 3


class ScenarioLoadError(DataError):
    """A canonical scenario file failed validation. `offenders` holds (line, column, message)."""

    def __init__(self, path: str, offenders: list[tuple[int, int | None, str]]):
        self.path = path
        self.offenders = offenders
        shown = "; ".join(
            f"line {line}" + (f" col {col}" if col is not None else "") + f": {msg}"
            for line, col, msg in offenders[:20]
        )
        more = f" (+{len(offenders) - 20} more)" if len(offenders) > 20 else ""
        super().__init__(f"{path}: {shown}{more}")


class NumericError(DvaeError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4
