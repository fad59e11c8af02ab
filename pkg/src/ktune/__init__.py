"""Per-clip tuning of the encoder Lagrange multiplier scale ``k`` by direct BD-Rate search."""

from ktune.errors import (
    CurveError,
    EncodeError,
    FitError,
    KtuneError,
    LogParseError,
    ManifestError,
    OverlapError,
)
from ktune.model import (
    ClassLabel,
    ClipManifest,
    ClipResult,
    Method,
    MetricKind,
    OptimizerTrace,
    QualityMetric,
    RDCurve,
    RDPoint,
    default_bitrate_ladder,
    load_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "ClassLabel",
    "ClipManifest",
    "ClipResult",
    "CurveError",
    "EncodeError",
    "FitError",
    "KtuneError",
    "LogParseError",
    "ManifestError",
    "Method",
    "MetricKind",
    "OptimizerTrace",
    "OverlapError",
    "QualityMetric",
    "RDCurve",
    "RDPoint",
    "default_bitrate_ladder",
    "load_manifest",
]
