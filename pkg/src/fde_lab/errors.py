"""Exception hierarchy shared by all modules."""


class FDELabError(Exception):
    """Base class for every error raised by fde_lab."""


class ConfigurationError(FDELabError, ValueError):
    """Invalid grid, run configuration or construction parameters."""


class ContractError(FDELabError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class ParameterError(FDELabError, ValueError):
    """Model parameters outside the admissible range (e.g. b >= lambda_1)."""


class DomainError(FDELabError, ValueError):
    """Evaluation outside the domain of a closed formula (e.g. t > T*)."""


class SolverError(FDELabError, RuntimeError):
    """An iterative solver failed to converge.

    ``diagnostics`` carries whatever the solver knew at the point of failure
    (last residual, iteration count, bracket values, ...).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class StepFailure(SolverError):
    """A single implicit time step did not converge."""


class RunFailure(SolverError):
    """A time integration gave up; ``partial`` holds the trajectory so far."""

    def __init__(self, message, partial=None, **diagnostics):
        super().__init__(message, **diagnostics)
        self.partial = partial


class EstimationError(FDELabError, ValueError):
    """Too little (or unusable) data for a fit or a sampled estimate."""
