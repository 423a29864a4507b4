"""Interchange-intervention alignment search on small MLPs, in plain numpy."""

from .errors import (AssumptionError, BudgetError, CausalignError, ConfigError,
                     MissingArtifactError, ValidationError)

__version__ = "0.1.0"

__all__ = ["AssumptionError", "BudgetError", "CausalignError", "ConfigError",
           "MissingArtifactError", "ValidationError", "__version__"]
