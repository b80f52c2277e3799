"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 1 and ``SingularSystemError``
to exit code 2; everything else is a bug.
"""


class ValidationError(ValueError):
    """Invalid input: bad config, malformed data file, broken precondition."""


class SingularSystemError(RuntimeError):
    """A linear system required by an estimator is numerically singular."""

    def __init__(self, message: str, condition_number: float | None = None):
        super().__init__(message)
        self.condition_number = condition_number


class UnidentifiedEffectError(ValidationError):
    """The requested effect is not identified for the requested sub-population."""
