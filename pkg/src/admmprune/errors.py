"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor, mask, or index set has a structurally invalid shape."""


class ProtocolError(RuntimeError):
    """A collective was used inconsistently across the ranks of a group."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
