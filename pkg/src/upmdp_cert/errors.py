"""Exception hierarchy shared by all modules."""


class UpmdpError(Exception):
    pass


class ModelError(UpmdpError, ValueError):
    """Invalid model document, parameter space or valuation."""


class InstantiationError(ModelError):
    """A valuation does not induce a valid MDP; ``where`` names (s, a)."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class LearningError(UpmdpError, ValueError):
    """Learned intervals violate the row-feasibility invariant."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class PropernessError(UpmdpError, ValueError):
    """Expected-reward objective where the target may never be reached."""


class ConvergenceError(UpmdpError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CertificationInfeasible(UpmdpError, ValueError):
    """No admissible K exists for the requested (N, gamma, eta, k)."""
