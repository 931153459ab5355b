"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """A configuration is malformed or internally inconsistent."""


class UnsupportedError(ValueError):
    """Input is valid in general but outside what a solver handles."""


class SizeError(ValueError):
    """Input is too large for an exhaustive routine."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class StateError(RuntimeError):
    """An object was used in the wrong state (e.g. a step without gradients)."""
