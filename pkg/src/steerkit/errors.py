"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
NonConvergenceError -> 3, CoercivityError (and subclasses) -> 4,
DivergenceError -> 5.  Anything else is a generic failure.
"""


class SteerkitError(Exception):
    """Base class for all toolkit errors."""


class GridError(SteerkitError):
    """Malformed time grid or mismatched grids between objects."""


class DivergenceError(SteerkitError):
    """An integration produced a non-finite state."""

    def __init__(self, message, node=None, time=None):
        super().__init__(message)
        self.node = node
        self.time = time


class ModelError(SteerkitError):
    """Invalid model parameters (e.g. singular pendulum length)."""


class CoercivityError(SteerkitError):
    """The almost-optimal Gramian fails the coercivity floor."""

    def __init__(self, message, lambda_min=None):
        super().__init__(message)
        self.lambda_min = lambda_min


class SingularGramianError(CoercivityError):
    """The optimal Gramian is numerically singular / too ill-conditioned."""

    def __init__(self, message, cond=None):
        super().__init__(message, lambda_min=None)
        self.cond = cond


class NonConvergenceError(SteerkitError):
    """Picard iteration exhausted max_iter without meeting tolerance."""

    def __init__(self, message, residuals=None, report=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []
        self.report = report


class ApplicabilityError(SteerkitError):
    """An operation was invoked on a system it does not apply to."""


class FlatnessSingularityError(SteerkitError):
    """The flat output path has (near-)zero speed somewhere."""


class SingularInputError(SteerkitError):
    """The input matrix is (near-)singular along a feedback run."""


class ConfigError(SteerkitError):
    """Invalid or incomplete run configuration."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
