"""Zonal prostate segmentation from elastography parameter maps.

A small numpy Dense U-net, synthetic phantoms with known zone masks, the
preprocessing and elastic augmentation around it, and the overlap,
boundary and t-test metrics used to score it.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    CANONICAL_COMBOS,
    CANONICAL_ORDER,
    CaseRecord,
    InputCombo,
    MapKind,
    MaskSet,
    VolumeGrid,
    validate_combo,
)
from .errors import ZoneforgeError  # noqa: E402

__all__ = [
    "CANONICAL_COMBOS",
    "CANONICAL_ORDER",
    "CaseRecord",
    "InputCombo",
    "MapKind",
    "MaskSet",
    "VolumeGrid",
    "ZoneforgeError",
    "validate_combo",
    "__version__",
]
