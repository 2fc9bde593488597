"""Exception types shared across the solvers."""


class ValidationError(ValueError):
    """Input data violates a structural invariant."""


class InfeasibleError(ValueError):
    """No trajectory with finite total cost exists from the queried start."""


class DeadStateError(ValueError):
    """A step distribution was requested at a state with no admissible successor."""


class BudgetExceededError(RuntimeError):
    """An exhaustive computation would exceed its configured size budget."""


class SupportError(ValueError):
    """A distribution puts mass on a path the free dynamics cannot produce."""


class NonConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap without meeting its tolerance."""


class EstimationError(RuntimeError):
    """A Monte Carlo estimate could not be formed from the drawn samples."""
