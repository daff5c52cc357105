class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigurationError(ValueError):
    """Operation parameters cannot produce a valid result (e.g. empty output)."""


class DegenerateVarianceError(ValueError):
    """Batch statistics requested over fewer than two elements."""
