"""Exception types shared across modules."""


class SpectransError(Exception):
    """Base class for package errors."""


class InvalidModelError(SpectransError, ValueError):
    pass


class PoleError(SpectransError, ValueError):
    pass


class WrapAroundError(SpectransError, ValueError):
    """Lattice too short for the hopping range."""


class SolverFailure(SpectransError, ArithmeticError):
    def __init__(self, message, partial_dimension=None):
        super().__init__(message)
        self.partial_dimension = partial_dimension


class NearEPError(SpectransError, ArithmeticError):
    """Matrix is (numerically) defective; callers treat this as an EP signal."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class InvalidInputError(SpectransError, ValueError):
    pass


class SizeMismatchError(SpectransError, ValueError):
    pass


class PreconditionError(SpectransError, ValueError):
    pass


class NotFoundError(SpectransError, LookupError):
    pass


class NotBracketedError(SpectransError, ValueError):
    pass


class AmbiguousCentralError(SpectransError, ValueError):
    pass


class AtTransitionError(SpectransError, ArithmeticError):
    """A zero of R+/R- sits on the generalized Brillouin zone."""


class OnSpectrumError(SpectransError, ArithmeticError):
    """Reference energy lies on the spectrum for some phase."""


class ConditioningError(SpectransError, ArithmeticError):
    pass


class ConfigError(SpectransError, ValueError):
    pass


class WrongArityError(SpectransError, ValueError):
    """Operation needs a different number of bands."""
