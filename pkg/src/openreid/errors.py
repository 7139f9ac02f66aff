"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented precondition."""


class UndefinedMetricError(ValidationError):
    """A metric was requested on a set where it is mathematically undefined."""
