"""Exception hierarchy shared by every rankscope module."""


class RankscopeError(Exception):
    """Base class for all library errors."""


class InvalidMatrix(RankscopeError, ValueError):
    pass


class InvalidExponent(RankscopeError, ValueError):
    pass


class InvalidArchitecture(RankscopeError, ValueError):
    pass


class ShapeError(RankscopeError, ValueError):
    pass


class NotReLU(RankscopeError, ValueError):
    pass


class CompositionError(RankscopeError, ValueError):
    pass


class DepthError(RankscopeError, ValueError):
    pass


class CheckpointError(RankscopeError, ValueError):
    """Malformed or unsupported checkpoint document."""


class LabelError(RankscopeError, ValueError):
    pass


class ConfigError(RankscopeError, ValueError):
    pass


class DivergenceError(RankscopeError, ArithmeticError):
    """Training produced a non-finite loss.

    ``params`` holds the last parameters with a finite loss and ``history``
    the steps recorded up to that point.
    """

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history


class UnfitError(RankscopeError, ArithmeticError):
    def __init__(self, message, best_data_term=float("inf")):
        super().__init__(message)
        self.best_data_term = best_data_term


class NoProbes(RankscopeError, ValueError):
    pass


class DegenerateBatch(RankscopeError, ValueError):
    pass


class TooFewPoints(RankscopeError, ValueError):
    pass


class DegenerateInputs(RankscopeError, ValueError):
    pass


class ProjectionError(RankscopeError, ArithmeticError):
    pass


class IllConditioned(RankscopeError, ArithmeticError):
    pass


class DimError(RankscopeError, ValueError):
    pass


class FormatError(RankscopeError, ValueError):
    pass
