"""Exception taxonomy shared across the package."""


class EvtrackError(Exception):
    """Base class for all package errors."""


class ConfigError(EvtrackError):
    """Inconsistent shapes, sizes, or configuration values."""


class UsageError(EvtrackError):
    """An operation was called in a way its contract forbids."""


class DegenerateWindowError(EvtrackError):
    """A time window with non-positive duration."""


class OrderingError(EvtrackError):
    """Streaming inputs arrived out of time order."""


class RefinementError(EvtrackError):
    """Non-finite values produced during trajectory refinement."""


class TrainingError(EvtrackError):
    """Non-finite loss or gradients during optimization."""


class MetricError(EvtrackError):
    """A metric is undefined for the given inputs."""
