"""cellkit: post-encoder engine for histopathology cell analysis.

Turns precomputed network output tensors into instance segmentations, cell
embeddings, trained cell-type classifiers, evaluation reports, and
auto-generated labeled datasets, with an HTTP service for a
relabel -> retrain annotation loop.
"""

from . import clsmod, datagen, metrics, postproc, tensorio, tokens, wsi
from .errors import CellKitError

__version__ = "0.1.0"

__all__ = [
    "CellKitError",
    "clsmod",
    "datagen",
    "metrics",
    "postproc",
    "tensorio",
    "tokens",
    "wsi",
    "__version__",
]
