"""Exception types shared across the toolkit."""


class DasError(Exception):
    """Base class for toolkit errors."""


class ConfigError(DasError, ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class FormatError(DasError, ValueError):
    """Malformed file or schema-version mismatch (CLI exit code 2)."""


class NonFiniteError(DasError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""
