"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input falls outside an op's mathematical domain."""


class ConfigError(ValueError):
    """A component or experiment setting is invalid."""
