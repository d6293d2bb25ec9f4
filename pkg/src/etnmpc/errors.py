"""Exception hierarchy shared by every module."""


class EtnmpcError(Exception):
    """Base class for all package errors."""


class ContractViolation(EtnmpcError, ValueError):
    """Input outside an operation's stated preconditions."""


class InvalidConfiguration(EtnmpcError, ValueError):
    pass


class StateError(EtnmpcError, RuntimeError):
    pass


class IntegrationDiverged(EtnmpcError, ArithmeticError):
    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"non-finite state at t={self.t:.17g}")


class NotStabilizedError(EtnmpcError, ValueError):
    """Closed-loop matrix handed to the Lyapunov solver is not Hurwitz."""


class NotStabilizableError(EtnmpcError, ValueError):
    pass


class NumericalFailure(EtnmpcError, ArithmeticError):
    pass


class RegionSynthesisFailed(EtnmpcError, RuntimeError):
    pass


class InternalInconsistency(EtnmpcError, RuntimeError):
    pass


class InfeasibleError(EtnmpcError, RuntimeError):
    """No admissible input steers the prediction into the inner terminal set."""

    def __init__(self, best_terminal_vf, target, message=None):
        self.best_terminal_vf = float(best_terminal_vf)
        self.target = float(target)
        super().__init__(
            message
            or f"terminal constraint not met: V_f={self.best_terminal_vf:.6g} > {self.target:.6g}"
        )


class InitialInfeasible(EtnmpcError, RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class FeasibilityLost(EtnmpcError, RuntimeError):
    """An OCP after t_0 failed, or a schedule broke the feasibility conditions."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
