"""Exception taxonomy.

Every failure the toolkit raises on purpose derives from FixquantError and
carries a short machine-readable category. The CLI maps categories onto exit
codes (data problems vs. numeric failures), so new exception types should pick
the category deliberately.
"""

from __future__ import annotations


class FixquantError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ShapeError(FixquantError):
    """Operand shapes or ranks are incompatible with the requested op."""

    category = "shape"


class NumericError(FixquantError):
    """Non-finite values, accumulator overflow, or training divergence."""

    category = "numeric"


class EncodingError(FixquantError):
    """Invalid, missing, or inconsistent quantization encodings."""

    category = "encoding"


class ModelFormatError(FixquantError):
    """Malformed model manifest, weight blob, dataset, or encodings file."""

    category = "format"


class GraphError(FixquantError):
    """Structurally invalid graph: cycles, dangling edges, bad node kinds."""

    category = "graph"


class CalibrationError(FixquantError):
    """Calibration cannot proceed (no data, no observed statistics)."""

    category = "calibration"


class CacheError(FixquantError):
    """Missing, corrupt, or mismatched result cache."""

    category = "cache"
