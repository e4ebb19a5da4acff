from __future__ import annotations


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class DomainError(ValueError):
    """A parameter lies outside the domain of the operation."""


class MGFUndefinedError(DomainError):
    """The moment generating function does not exist at the requested lambda."""


class DatasetParseError(ValueError):
    def __init__(self, message: str, line: int, column: str | None = None) -> None:
        location = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{location}: {message}")
        self.line = line
        self.column = column


class DatasetValidationError(ValueError):
    """Parsed data violates a dataset invariant."""


class ModelFormatError(ValueError):
    """A model document cannot be decoded."""


class TrainingDivergedError(RuntimeError):
    """The variational bound became non-finite while optimizing."""


class BoundEvaluationError(RuntimeError):
    """A bound evaluated to a non-finite value during a sweep."""
