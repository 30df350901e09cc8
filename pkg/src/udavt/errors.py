"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a computation."""
