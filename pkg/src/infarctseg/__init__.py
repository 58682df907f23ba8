"""Ischemic infarct segmentation on non-contrast CT with a residual-encoder U-Net.

Submodules: ``core`` (domain types), ``io`` (NIfTI, manifests, phantoms),
``preprocess``, ``network``, ``training``, ``evaluation``, ``overlay``, ``cli``.
"""
from .core import CaseRecord, LabelMask, LabelSchema, Spacing, Volume
from .errors import ConfigurationError, DataError, InfarctSegError

__version__ = "0.1.0"

__all__ = [
    "CaseRecord",
    "ConfigurationError",
    "DataError",
    "InfarctSegError",
    "LabelMask",
    "LabelSchema",
    "Spacing",
    "Volume",
    "__version__",
]
