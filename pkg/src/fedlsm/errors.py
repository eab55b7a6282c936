"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/validation problems
exit with 1, numeric failures with 2.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unsatisfiable config combination."""


class ShapeError(ValueError):
    """Tensor/parameter dimension mismatch."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class AggregationError(ValueError):
    """Client updates incompatible with each other or with the global model."""


class NumericError(RuntimeError):
    """Non-finite value encountered during training or optimization."""
