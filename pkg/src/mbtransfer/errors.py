"""Exception hierarchy shared by every stage of the framework."""

from __future__ import annotations


class MBError(Exception):
    """Base class for all framework errors."""


class InvalidInputError(MBError, ValueError):
    pass


class ShapeError(MBError, ValueError):
    pass


class ConfigError(MBError, ValueError):
    pass


class DataError(MBError):
    pass


class ChecksumError(DataError):
    def __init__(self, path: str, expected: str, actual: str):
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")
        self.path = path


class MissingFileError(DataError, FileNotFoundError):
    def __init__(self, path: str, sample_id: int | None = None):
        what = f" (sample {sample_id})" if sample_id is not None else ""
        super().__init__(f"missing file {path}{what}")
        self.path = path
        self.sample_id = sample_id


class VersionMismatchError(DataError):
    pass


class DivergenceError(MBError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""
