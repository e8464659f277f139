from .errors import AniganError, ConfigurationError, NumericalError, TrainingError, ValidationError

__all__ = ["AniganError", "ConfigurationError", "NumericalError", "TrainingError", "ValidationError"]

__version__ = "0.1.0"
