"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses.
"""


class CausalignError(Exception):
    exit_code = 1


class ShapeError(CausalignError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class SingularMatrixError(CausalignError, ArithmeticError):
    exit_code = 1


class ValidationError(CausalignError, ValueError):
    """A value violates a documented precondition."""

    exit_code = 2


class GraphError(ValidationError):
    """A causal graph is malformed (cycle, dangling parent, ...)."""


class ConfigError(ValidationError):
    """A configuration is internally inconsistent."""


class MissingArtifactError(CausalignError, FileNotFoundError):
    exit_code = 3


class BudgetError(CausalignError, RuntimeError):
    """An enumeration or search exceeded its configured budget."""

    exit_code = 4


class AssumptionError(CausalignError):
    """A precondition of the lookup-map construction does not hold."""

    exit_code = 5

    def __init__(self, assumption, message):
        super().__init__(f"{assumption}: {message}")
        self.assumption = assumption


class ConstructionError(CausalignError, RuntimeError):
    exit_code = 5
