"""Exception taxonomy shared by all lipdub modules."""


class LipdubError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LipdubError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(LipdubError, ValueError):
    """A tensor/array has the wrong shape or width."""


class FormatError(LipdubError, ValueError):
    """An on-disk artifact is corrupt or truncated; carries the offending path."""

    def __init__(self, message: str, path=None):
        if path is not None:
            message = f"{message} (path: {path})"
        super().__init__(message)
        self.path = str(path) if path is not None else None


class StateError(LipdubError, RuntimeError):
    """An operation was called in an invalid state (missing prerequisite,
    double attach, unfrozen extractor, model-group mismatch)."""


class NumericError(LipdubError, RuntimeError):
    """Non-finite values were produced; names the offending layer or step."""
