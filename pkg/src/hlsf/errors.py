"""Exception types shared across the package."""


class HLSFError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HLSFError, ValueError):
    """An operation received input violating its preconditions."""


class EmptyCandidateError(InvalidInputError):
    """No lane segment lies within the search radius of a vehicle."""


class ConfigError(HLSFError, ValueError):
    """A configuration value or combination of values is not allowed."""


class ShapeError(HLSFError, ValueError):
    """A tensor or array has the wrong width or count."""


class SceneParseError(HLSFError, ValueError):
    """A scene or prediction file failed schema validation."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class TrainingDivergedError(HLSFError, RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, message: str, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"{message}; snapshot={snapshot}")
