"""Exception types shared across the pipeline.

The CLI maps each family to its own exit code.
"""


class VistrError(Exception):
    pass


class ConfigError(VistrError, ValueError):
    """Invalid run configuration."""


class DataError(VistrError, ValueError):
    """Malformed or inconsistent dataset / model files."""


class NumericalError(VistrError, ArithmeticError):
    """A numerical routine could not produce a usable result."""


class SingularNormalEquations(NumericalError):
    """A least-squares update had a singular (or zero) Gram matrix."""


class SingularConfiguration(NumericalError):
    """The arm Jacobian lost rank, so the requested displacement is unreachable."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before meeting its tolerance."""
