"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DistributionError(ValueError):
    """An operand is not a valid probability distribution."""


class ConfigurationError(ValueError):
    """Invalid hyperparameters, scale sets, or model pairings."""


class FormatError(ValueError):
    """A binary container or dataset file is malformed."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss or gradient.

    ``term`` names the offending loss component when known.
    """

    def __init__(self, message, term=None, epoch=None, batch=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch
        self.batch = batch
