class ManifoldNetError(Exception):
    """Base class for errors raised by this package."""


class FormatError(ManifoldNetError):
    """A file does not conform to its declared format."""


class ConfigError(ManifoldNetError):
    """A configuration key or value is invalid."""


class DivergenceError(ManifoldNetError):
    """An optimizer produced a non-finite loss."""
