"""Exception hierarchy shared across the package."""


class HypersynthError(Exception):
    """Base class for all package errors."""


class ContainerError(HypersynthError):
    """Malformed, truncated or corrupted container file."""


class ConfigError(HypersynthError):
    """Invalid user configuration."""


class NumericalError(HypersynthError):
    """Numerical failure: divergence, rank deficiency, mixing failure."""
