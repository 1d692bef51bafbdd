"""Exception types shared across the package."""
from __future__ import annotations


class RefivError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RefivError):
    """A caller-supplied configuration is malformed or inconsistent."""


class SchemaError(RefivError):
    """An input file does not conform to the expected schema."""


class SingularDesignError(RefivError):
    """A design matrix or Jacobian is rank deficient."""


class SeparationError(RefivError):
    """Logistic fitting detected (quasi-)complete separation."""


class ConvergenceError(RefivError):
    """An iterative procedure failed to converge.

    Carries the stage name so pipeline failures identify the offending step.
    """

    def __init__(self, message: str, *, stage: str | None = None) -> None:
        super().__init__(message if stage is None else f"{stage}: {message}")
        self.stage = stage


class DegenerateLawError(RefivError):
    """A component probability of a joint law left the admissible range."""


class RelevanceError(RefivError):
    """The instrument carries no variation where variation is required."""


class BootstrapInstabilityError(RefivError):
    """Too large a fraction of bootstrap replicates failed."""


class ExtremeWeightWarning(UserWarning):
    """A cell probability below 1e-6 produced an extreme inverse weight."""
