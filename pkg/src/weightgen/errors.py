"""Exception types; the CLI maps each to a distinct exit code."""


class WeightGenError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WeightGenError):
    """Unknown preset, invalid option value, or unusable inputs (e.g. empty pool)."""


class StructuralError(WeightGenError):
    """Tensor or shape structure does not match the declared architecture."""


class CapacityError(WeightGenError):
    """A sequence or embedding table exceeds the configured capacity."""


class ProtocolError(WeightGenError):
    """Evaluation protocol violation, e.g. methods compared on different teacher tuples."""
