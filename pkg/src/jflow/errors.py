"""Exception hierarchy shared by all jflow modules."""


class JFlowError(Exception):
    """Base class for every error raised by jflow."""


class InvalidFieldError(JFlowError, ValueError):
    pass


class GridMismatchError(JFlowError, ValueError):
    pass


class DegenerateClassError(JFlowError, ValueError):
    pass


class SingularMetricError(JFlowError, ValueError):
    pass


class NormalizationError(JFlowError, ValueError):
    """Background forms are not scaled so that the topological constant is 1."""


class PreconditionError(JFlowError, ValueError):
    pass


class NotInPChiError(JFlowError, ValueError):
    """chi + dd^c phi failed to be positive definite somewhere."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class StiffnessError(JFlowError, RuntimeError):
    def __init__(self, message, node=None, dt=None):
        super().__init__(message)
        self.node = node
        self.dt = dt


class ContinuationNeededError(JFlowError, RuntimeError):
    """Newton line search could not keep the form positive."""


class NoConvergenceError(JFlowError, RuntimeError):
    pass


class FamilyError(JFlowError, RuntimeError):
    def __init__(self, message, delta):
        super().__init__(message)
        self.delta = delta


class ConfigError(JFlowError, ValueError):
    """Scenario validation failed; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StageError(JFlowError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
