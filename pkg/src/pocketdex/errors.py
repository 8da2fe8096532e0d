"""Exception hierarchy. Everything raised on bad input derives from PocketdexError."""


class PocketdexError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class ParseError(PocketdexError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatchError(PocketdexError, ValueError):
    pass


class EntityTooLongError(PocketdexError, ValueError):
    pass


class DegenerateInputError(PocketdexError, ValueError):
    pass


class TrainingDivergedError(PocketdexError):
    """Raised when a loss term goes non-finite. ``last_good`` holds the last finite state."""

    def __init__(self, message: str, term: str, last_good=None):
        super().__init__(message)
        self.term = term
        self.last_good = last_good


class EmptyPocketError(PocketdexError):
    pass


# -- binary file formats -------------------------------------------------
class FormatError(PocketdexError):
    """Base for index / checkpoint decoding failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CorruptHeaderError(FormatError):
    pass


class DuplicateIdError(FormatError, ValueError):
    pass


class MissingAnnotationError(PocketdexError, ValueError):
    pass
