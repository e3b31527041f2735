from __future__ import annotations

from typing import Any, Dict, Optional


class ConfigurationError(ValueError):
    """
    Raised when a configuration value, a network shape or an input dimension
    does not match what the receiving component expects.
    """


class UsageError(ValueError):
    """
    Raised when an operation is called with arguments outside its domain,
    e.g. an out-of-range action or a request for zero episodes.
    """


class NumericalError(ArithmeticError):
    """
    Raised when a non-finite value shows up during a forward or backward
    pass. `layer` holds the index of the offending layer when known.
    """

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f'{message} (layer {layer})'
        super().__init__(message)
        self.layer = layer


class IllConditionedError(NumericalError):
    """
    Raised by the least-squares estimators when the normal equations are too
    ill-conditioned to be solved without ridge regularization.
    """


class BatchPurityError(RuntimeError):
    """
    Raised when a simulator is stepped while the batch-purity guard is active.
    """


class ExpertTrainingError(RuntimeError):
    """
    Raised when the online expert could not reach the solve criterion of its
    environment within the configured budget.
    """

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(f'{message}: {diagnostics}')
        self.diagnostics = diagnostics


class Converged(Exception):
    """
    Signal raised by the max-margin QP when the expert feature expectation can
    no longer be separated from the candidates. `solution` carries the best
    effort max-margin direction.
    """

    def __init__(self, solution: Any):
        super().__init__('Max-margin constraints are infeasible')
        self.solution = solution


class SplitWarning(UserWarning):
    pass


class ValidationFallbackWarning(UserWarning):
    pass


class SupportMismatchWarning(UserWarning):
    pass


class NonConvergenceWarning(UserWarning):
    pass
