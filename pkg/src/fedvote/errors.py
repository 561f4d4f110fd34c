"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor or batch has incompatible dimensions for the requested operation."""


class FormatError(ValueError):
    """An on-disk artifact (dataset, checkpoint, config) is malformed."""


class CompatibilityError(ValueError):
    """Two models or parameter vectors cannot be combined (kind/length mismatch)."""


class ConfigError(ValueError):
    """A run configuration failed validation; the message lists every problem found."""
