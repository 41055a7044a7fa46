"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError and its
subclasses exit 2, NumericalError exits 3.
"""


class BiconError(Exception):
    pass


class DataError(BiconError):
    """Invalid input data, config, or file contents."""


class ShapeError(DataError):
    """Incompatible tensor shapes for an operation."""


class CheckpointError(DataError):
    """Corrupt checkpoint file or mismatch against the expected model."""


class NumericalError(BiconError):
    """NaN or other numerical breakdown during training."""
