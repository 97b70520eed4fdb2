class ConfigError(ValueError):
    """Invalid configuration value (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss or moments (CLI exit code 3)."""


class ShapeError(ValueError):
    """Tensor shape inconsistent with the architecture."""
