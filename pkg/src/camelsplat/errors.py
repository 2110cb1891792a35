"""Shared exception types."""


class CamelSplatError(Exception):
    """Base class for package errors."""


class DegenerateInputError(CamelSplatError, ValueError):
    """Numerically meaningless input: zero-norm quaternion, colinear look-at."""


class DataError(CamelSplatError, ValueError):
    """Malformed or inconsistent scene, body, or checkpoint data."""


class ConfigError(CamelSplatError, ValueError):
    """Invalid configuration values or combinations."""


class DivergenceError(CamelSplatError, RuntimeError):
    """Optimization produced non-finite losses or parameters."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
