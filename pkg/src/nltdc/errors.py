"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    """A precondition on an argument does not hold."""


class DegenerateChainError(RuntimeError):
    """The state chain has no unique stationary distribution."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class NonMixingError(RuntimeError):
    """Total variation failed to decay within the requested horizon."""


class AssumptionViolation(ValueError):
    """A structural assumption required by a constant formula fails."""


class NumericalBlowup(FloatingPointError):
    """A TDC iterate became non-finite."""

    def __init__(self, t, theta_norm, omega_norm, seed=None):
        self.t = int(t)
        self.theta_norm = float(theta_norm)
        self.omega_norm = float(omega_norm)
        self.seed = seed
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(
            f"non-finite iterate at step {self.t}{where}: "
            f"|theta|={self.theta_norm:.3g}, |omega|={self.omega_norm:.3g}"
        )
