"""Exception types shared across the package.

Plain ValueError is used for invalid arguments; the classes below mark
conditions callers are expected to branch on.
"""


class DomainError(ValueError):
    """An input is outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration value fails validation (field named in the message)."""


class NotReadyError(RuntimeError):
    """Not enough accumulated state to answer yet."""


class RoutingHoleError(RuntimeError):
    """A node holds traffic for a commodity with no positive-rate next hop."""
