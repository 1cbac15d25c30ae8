"""Exception types shared across the toolkit."""


class CosalError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CosalError, ValueError):
    """Input values violate an operation's preconditions."""


class ShapeError(ValidationError):
    """Array shapes do not match what an operation expects."""


class ConfigurationError(CosalError):
    """A run or corruption configuration is invalid or incomplete."""


class BackendUnavailableError(CosalError, RuntimeError):
    """The requested backend, head or feature cannot be used in this environment."""


class ConceptLearningError(CosalError, RuntimeError):
    """Concept optimisation diverged or could not start."""
