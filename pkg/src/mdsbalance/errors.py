"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


class IntegrationError(ArithmeticError):
    """The ODE integrator left the admissible region (step too large)."""


class SimulationError(RuntimeError):
    """The event-driven simulation could not continue."""


class StateSpaceError(ValueError):
    """The capped state space is too large to enumerate."""


class SingularChainError(ArithmeticError):
    """The balance equations of the capped chain have no unique solution."""
