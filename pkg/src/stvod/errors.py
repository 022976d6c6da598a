"""Exception types shared across the package.

Contract violations (bad shapes, bad arguments) raise ContractError; broken
files raise ParseError.  The CLI maps these to exit codes 1 and 2.
"""

from __future__ import annotations


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class DimensionError(ContractError):
    """Shape mismatch.  Always names both offending shapes."""

    def __init__(self, what: str, a, b) -> None:
        super().__init__(f"{what}: {tuple(a)} vs {tuple(b)}")


class ParseError(Exception):
    """A file could not be parsed.  Carries the path and a location hint."""

    def __init__(self, path, location, message: str) -> None:
        self.path = str(path)
        self.location = location
        super().__init__(f"{path}: {location}: {message}")
