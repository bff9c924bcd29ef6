"""Exception types raised by fscgrad.

The CLI maps these onto process exit codes (see ``fscgrad.cli``).
"""


class FscGradError(Exception):
    """Base class for all fscgrad errors."""


class ConfigError(FscGradError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class ModelFormatError(FscGradError, ValueError):
    """Syntax or semantic error in a model description."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonStochasticError(ModelFormatError):
    """A probability row does not sum to one."""


class DimensionMismatchError(FscGradError, ValueError):
    """Model and policy (or critic) spaces do not agree."""


class AssumptionViolation(FscGradError, RuntimeError):
    """The joint chain is not unichain, so stationary quantities are not unique."""

    def __init__(self, message, classes=None):
        self.classes = classes or []
        super().__init__(message)


class FeatureError(FscGradError, ValueError):
    """A critic feature matrix is empty, rank deficient or spans the constants."""
