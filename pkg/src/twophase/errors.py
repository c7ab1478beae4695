class ConfigurationError(ValueError):
    """Inputs violate a documented invariant (bad grid, bad parameters)."""


class NumericalError(RuntimeError):
    """A solve failed or produced an unacceptable residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PerturbationTooLarge(NumericalError):
    """The extension Id + phi is not a bijection."""


class JacobianNotInvertible(NumericalError):
    """A modal derivative is below the flag threshold."""


class DivergenceError(NumericalError):
    """Quasi-Newton residual grew for several consecutive iterations."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MeshQualityError(NumericalError):
    """A mapped mesh has inverted or too-flat elements."""

    def __init__(self, message, region=None):
        super().__init__(message)
        self.region = region
