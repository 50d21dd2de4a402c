"""Core domain types and target normalization.

Everything here is an immutable value plus pure functions over it, so any
number of workers can share these without coordination. Units are kept as
they appear in the source data: steering in degrees, speed in km/h,
positions in decimal degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError

# Canonical order of the semantic-map feature columns. Folder one-hots, when
# enabled, are appended after these 20.
SEMANTIC_COLUMNS: tuple[str, ...] = (
    "hereMmLatitude",
    "hereMmLongitude",
    "hereSpeedLimit",
    "hereSpeedLimit_2",
    "hereFreeFlowSpeed",
    "hereSignal",
    "hereYield",
    "herePedestrian",
    "hereIntersection",
    "hereMmIntersection",
    "hereSegmentExitHeading",
    "hereSegmentEntryHeading",
    "hereCurvature",
    "hereCurrentHeading",
    "here1mHeading",
    "here5mHeading",
    "here10mHeading",
    "here20mHeading",
    "here50mHeading",
    "hereTurnNumber",
)

N_SEMANTIC_FEATURES = len(SEMANTIC_COLUMNS)
N_FOLDER_DUMMIES = 27
NATIVE_FPS = 10
# Current/previous frames are 0.4 s apart, i.e. 4 native frames at 10 fps.
PAIR_OFFSET_FRAMES = 4


@dataclass(frozen=True, order=True)
class SampleKey:
    """Identifies one timestep: (route, chapter, native 10 fps frame index)."""

    route_id: str
    chapter_id: str
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(f"frame_index must be >= 0, got {self.frame_index}")


@dataclass(frozen=True)
class TargetPair:
    """Ground-truth or predicted (steering angle [deg], speed [km/h])."""

    steering_angle: float
    speed: float


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel image stats and per-target stats used for normalization."""

    image_channel_mean: tuple[float, float, float]
    image_channel_std: tuple[float, float, float]
    angle_mean: float
    angle_std: float
    speed_mean: float
    speed_std: float

    def validate(self) -> "NormalizationStats":
        stds = list(self.image_channel_std) + [self.angle_std, self.speed_std]
        if any((not math.isfinite(s)) or s <= 0 for s in stds):
            raise ConfigurationError(f"all std fields must be finite and > 0, got {self}")
        return self

    def to_dict(self) -> dict:
        return {
            "image_channel_mean": list(self.image_channel_mean),
            "image_channel_std": list(self.image_channel_std),
            "angle_mean": self.angle_mean,
            "angle_std": self.angle_std,
            "speed_mean": self.speed_mean,
            "speed_std": self.speed_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            image_channel_mean=tuple(d["image_channel_mean"]),
            image_channel_std=tuple(d["image_channel_std"]),
            angle_mean=float(d["angle_mean"]),
            angle_std=float(d["angle_std"]),
            speed_mean=float(d["speed_mean"]),
            speed_std=float(d["speed_std"]),
        ).validate()


@dataclass(frozen=True)
class SemanticFeatureVector:
    """The 20 map features for one frame, plus an optional 27-wide folder one-hot.

    ``missing_mask[i]`` is True where the source cell was empty/NaN; the
    corresponding value is imputed to exactly 0.
    """

    values: tuple[float, ...]
    missing_mask: tuple[bool, ...]
    folder_onehot: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.values) != N_SEMANTIC_FEATURES or len(self.missing_mask) != N_SEMANTIC_FEATURES:
            raise ValidationError(
                f"expected {N_SEMANTIC_FEATURES} values/mask entries, "
                f"got {len(self.values)}/{len(self.missing_mask)}"
            )
        for v, m in zip(self.values, self.missing_mask):
            if m and v != 0.0:
                raise ValidationError("masked values must be imputed to exactly 0")
        if self.folder_onehot is not None:
            if len(self.folder_onehot) != N_FOLDER_DUMMIES:
                raise ValidationError(
                    f"folder_onehot must have {N_FOLDER_DUMMIES} entries, got {len(self.folder_onehot)}"
                )
            if sum(self.folder_onehot) != 1.0 or any(v not in (0.0, 1.0) for v in self.folder_onehot):
                raise ValidationError("folder_onehot must be a one-hot vector summing to 1")

    def as_array(self) -> np.ndarray:
        """Network input: the 20 values, with the one-hot appended when present."""
        if self.folder_onehot is None:
            return np.asarray(self.values, dtype=np.float64)
        return np.asarray(self.values + self.folder_onehot, dtype=np.float64)

    @property
    def dim(self) -> int:
        return N_SEMANTIC_FEATURES + (N_FOLDER_DUMMIES if self.folder_onehot is not None else 0)


@dataclass(frozen=True)
class FramePair:
    """Channel-normalized current image plus the image 0.4 s earlier.

    Arrays are float32 with shape (3, height, width).
    """

    previous: np.ndarray = field(repr=False)
    current: np.ndarray = field(repr=False)
    key: SampleKey | None = None


def normalize_target(t: TargetPair, s: NormalizationStats) -> tuple[float, float]:
    """Map raw (angle, speed) into normalized space: (x - mean) / std."""
    s.validate()
    return (
        (t.steering_angle - s.angle_mean) / s.angle_std,
        (t.speed - s.speed_mean) / s.speed_std,
    )


def denormalize_target(n: tuple[float, float], s: NormalizationStats) -> TargetPair:
    """Exact algebraic inverse of :func:`normalize_target`."""
    s.validate()
    return TargetPair(
        steering_angle=n[0] * s.angle_std + s.angle_mean,
        speed=n[1] * s.speed_std + s.speed_mean,
    )


def compute_target_stats(
    training_targets: "list[TargetPair]",
    image_channel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
    image_channel_std: tuple[float, float, float] = (0.25, 0.25, 0.25),
) -> NormalizationStats:
    """Population mean/std of angle and speed over the TRAINING split only.

    Image channel stats are pass-through configuration (the source data ships
    with provided defaults; they are not derivable from targets).
    """
    if len(training_targets) < 2:
        raise ConfigurationError(
            f"need at least 2 training targets to compute stats, got {len(training_targets)}"
        )
    angles = np.asarray([t.steering_angle for t in training_targets], dtype=np.float64)
    speeds = np.asarray([t.speed for t in training_targets], dtype=np.float64)
    angle_std = float(np.std(angles))
    speed_std = float(np.std(speeds))
    if angle_std == 0.0 or speed_std == 0.0:
        raise ConfigurationError("zero variance in training targets; cannot normalize")
    return NormalizationStats(
        image_channel_mean=tuple(float(v) for v in image_channel_mean),
        image_channel_std=tuple(float(v) for v in image_channel_std),
        angle_mean=float(np.mean(angles)),
        angle_std=angle_std,
        speed_mean=float(np.mean(speeds)),
        speed_std=speed_std,
    ).validate()


def normalize_image(pixels: np.ndarray, s: NormalizationStats) -> np.ndarray:
    """Normalize an (H, W, 3) uint8 or float image to a (3, H, W) float32 tensor.

    uint8 input is scaled to [0, 1] first; float input is assumed already in
    [0, 1]. Then each channel c maps to (x - mean[c]) / std[c].
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    mean = np.asarray(s.image_channel_mean, dtype=np.float32)
    std = np.asarray(s.image_channel_std, dtype=np.float32)
    out = (arr - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1))
