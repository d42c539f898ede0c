"""Exception types shared across the package."""


class TsfmLensError(Exception):
    pass


class ShapeError(TsfmLensError, ValueError):
    pass


class NumericError(TsfmLensError, ArithmeticError):
    pass


class UndefinedInputError(TsfmLensError, ValueError):
    pass


class DivergenceError(TsfmLensError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DecodeError(TsfmLensError, ValueError):
    pass


class PlanError(TsfmLensError, ValueError):
    pass


class BundleFormatError(TsfmLensError, ValueError):
    pass


class UnsupportedArchitectureError(TsfmLensError, NotImplementedError):
    pass


class ConfigError(TsfmLensError, ValueError):
    pass


class TrainingDiverged(TsfmLensError):
    """Raised when the loss stays above 10x its initial value for too long."""

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = list(curve)


class ContextTruncatedWarning(UserWarning):
    pass
