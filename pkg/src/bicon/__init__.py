"""Bi-encoder contrastive pre-training for few-shot relation extraction.

A desk-scale, NumPy-only stack: a reverse-mode autodiff tensor engine, two
decoupled toy transformer encoders for sentences and relation labels, a
symmetric (sentence-anchored + label-anchored) contrastive objective with
masked-language-model regularization, and episodic N-way-K-shot / zero-shot
evaluation with alignment/uniformity diagnostics.
"""

from .errors import (
    BiconError,
    CheckpointError,
    DataError,
    NumericalError,
    ShapeError,
)
from .tensor import Tensor, backward, no_grad

__all__ = [
    "BiconError",
    "CheckpointError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
]

__version__ = "0.1.0"
