"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` / :class:`TrainingError` to exit code 3.
"""


class AniganError(Exception):
    pass


class ValidationError(AniganError, ValueError):
    """Bad input: wrong shape, out-of-domain value, unknown attribute name."""


class ConfigurationError(ValidationError):
    pass


class NumericalError(AniganError, ArithmeticError):
    pass


class TrainingError(NumericalError):
    """Raised when a training step produces a non-finite value.

    ``step`` is the global step index and ``diagnostics`` holds whatever
    loss terms were computed before the failure.
    """

    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class BundleIntegrityError(AniganError):
    pass
