"""Membership inference auditing from intermediate activations.

Set ``MINTLAB_DISABLE_NUMBA=1`` before import to run the pure-numpy kernels.
"""
from .errors import (ConfigError, DataError, DisjointnessError, FormatError, MintError,
                     ProvenanceError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DisjointnessError", "FormatError", "MintError",
           "ProvenanceError", "__version__"]
