"""Exception types shared across the toolkit."""


class VgfmError(Exception):
    """Base class for all toolkit errors."""


class DomainError(VgfmError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateBoxError(DomainError):
    """Box has (near-)zero area in the relevant coordinate frame."""


class DegenerateVectorError(DomainError):
    """Vector norm too small for a normalized comparison."""


class FormatError(VgfmError):
    """A serialized file violates its binary/JSON schema.

    `offset` is the byte offset of the first offending field, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(VgfmError, ValueError):
    """Structurally well-formed input violates a semantic invariant."""


class TrainingDiverged(VgfmError):
    """A loss became non-finite; carries a diagnostic dump of the batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump
