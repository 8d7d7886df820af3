"""
msdpn : Multi-Stage Depth Prediction toolkit
------------------------------------------------------------------

``msdpn`` is a package of classes and functions for predicting dense depth
from a monocular image and a planar (2D) LiDAR scan, built and verified end
to end on self-generated synthetic scenes.

It provides utilities for:
- LiDAR-to-camera geometry and scan projection.
- proj-d / ref-d input encodings and scan dropout.
- A small reverse-mode autodiff core on NumPy.
- The multi-stage encoder-decoder network with cross stage feature aggregation.
- Masked-L1 training with Adam, checkpointing.
- Depth evaluation metrics (RMSE, REL, delta).
- Synthetic scene generation, ray casting and file I/O.
- Command-line experiment drivers.

********************************************************************************
"""

# --- Package Metadata ---
__version__ = "1.0.0"


# --- Custom Package Exceptions ---
class MsdpnError(Exception):
    """Base exception class for the msdpn package."""
    pass


class ConfigError(MsdpnError, ValueError):
    """Invalid configuration values or command-line arguments."""
    pass


class ShapeError(MsdpnError, ValueError):
    """Tensor or image shapes do not agree with what an operation requires."""
    pass


class GraphError(MsdpnError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, repeated backward)."""
    pass


class InvariantError(MsdpnError, AssertionError):
    """An internal invariant was violated; usually a bug upstream."""
    pass


class FormatError(MsdpnError, ValueError):
    """A binary or text file does not follow its on-disk format.

    Attributes:
        path (str): The offending file, if known.
        offset (int): Byte offset (binary formats) or line number (text formats)
                      where decoding failed.
    """

    def __init__(self, message: str, path=None, offset: int = None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = []
        if self.path is not None:
            where.append(f"file '{self.path}'")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


from . import numpy_utils
from . import system_utils
from . import logging_utils
from . import config_utils
from . import data_utils
from . import geometry
from . import encoding
from . import autodiff
from . import nn
from . import datagen
from . import train
from . import metrics
from . import cli


__all__ = [
    "MsdpnError",
    "ConfigError",
    "ShapeError",
    "GraphError",
    "InvariantError",
    "FormatError",
    "numpy_utils",
    "system_utils",
    "logging_utils",
    "config_utils",
    "data_utils",
    "geometry",
    "encoding",
    "autodiff",
    "nn",
    "datagen",
    "train",
    "metrics",
    "cli",
]
