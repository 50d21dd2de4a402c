"""Camera + semantic-map fusion pipeline for steering/speed prediction."""

from .core import (
    FramePair,
    NormalizationStats,
    SampleKey,
    SemanticFeatureVector,
    TargetPair,
    compute_target_stats,
    denormalize_target,
    normalize_target,
)

__version__ = "0.1.0"

__all__ = [
    "FramePair",
    "NormalizationStats",
    "SampleKey",
    "SemanticFeatureVector",
    "TargetPair",
    "compute_target_stats",
    "denormalize_target",
    "normalize_target",
    "__version__",
]
