"""Exception hierarchy shared across the package."""


class DeelboError(Exception):
    """Base class for all package errors."""


class ShapeError(DeelboError, ValueError):
    pass


class InvalidCovarianceError(DeelboError, ValueError):
    pass


class NumericalDegeneracyError(InvalidCovarianceError):
    """The K x K inner system of a low-rank covariance is not positive definite."""


class NumericalError(DeelboError, FloatingPointError):
    pass


class InvalidHyperparameterError(DeelboError, ValueError):
    pass


class ConfigurationError(DeelboError, ValueError):
    pass


class TrainingDivergedError(DeelboError, RuntimeError):
    def __init__(self, message, step=None, lr=None):
        super().__init__(message)
        self.step = step
        self.lr = lr


class DataFormatError(DeelboError, ValueError):
    pass


class CheckpointError(DeelboError, ValueError):
    pass
