"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TopologyError(ValueError):
    """A neighbor index points outside the node set."""


class DomainError(ValueError):
    """An operation received an input outside its domain (e.g. empty)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(ValueError):
    """Malformed dataset content (labels, manifests, audio files)."""


class EvaluationError(ValueError):
    """No class in an evaluation batch can be scored."""
