"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Malformed input: bad config values, non-finite coordinates, shape mismatch."""


class BudgetError(ValueError):
    """A payload would exceed the per-link byte budget."""


class ProtocolError(ValueError):
    """A wire message is malformed or addressed to a different grid."""
