"""Likelihood-weighted model ensembling over binned training-target distributions.

Training-set angle and speed values are digitized into evenly spaced bins
(100 and 30 by default); bin counts estimate the likelihood of a value, and
each member's prediction is weighted by the likelihood of the bin it lands
in. Distributions are always fitted on TRAINING targets only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError

ANGLE_BINS = 100
SPEED_BINS = 30

WEIGHTINGS = ("per_sample", "per_model")


@dataclass(frozen=True)
class BinnedDistribution:
    lo: float
    hi: float
    counts: tuple[int, ...]

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    def bin_index(self, v: float) -> int:
        """Evenly spaced digitization; out-of-range values clamp to edge bins."""
        raw = math.floor(self.n_bins * (v - self.lo) / (self.hi - self.lo))
        return min(max(raw, 0), self.n_bins - 1)


def fit_distribution(values, n_bins: int) -> BinnedDistribution:
    """Digitize training targets into ``n_bins`` evenly spaced bins over [min, max]."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 1:
        raise ConfigurationError("need at least one value to fit a distribution")
    if n_bins < 1:
        raise ConfigurationError(f"n_bins must be >= 1, got {n_bins}")
    lo = float(arr.min())
    hi = float(arr.max())
    if lo == hi:
        raise ConfigurationError(f"degenerate value range [{lo}, {hi}]; cannot bin")
    idx = np.floor(n_bins * (arr - lo) / (hi - lo)).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    counts = np.bincount(idx, minlength=n_bins)
    return BinnedDistribution(lo=lo, hi=hi, counts=tuple(int(c) for c in counts))


def likelihood(d: BinnedDistribution, v: float) -> float:
    """Empirical probability mass of the bin ``v`` falls in, in [0, 1]."""
    return d.counts[d.bin_index(v)] / d.total


def combine(
    members: list[dict],
    d: BinnedDistribution,
    weighting: str = "per_sample",
) -> dict:
    """Likelihood-weighted average of member predictions, aligned by key.

    per_sample: each member's weight at a sample is the likelihood of its own
    predicted value there. per_model: one global weight per member, the mean
    likelihood over all its predictions. Zero total weight falls back to the
    unweighted mean, which keeps the output total and convex.
    """
    if not members:
        raise ValidationError("combine needs at least one member")
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"unknown weighting {weighting!r}; options: {WEIGHTINGS}")
    base_keys = set(members[0])
    for m, preds in enumerate(members[1:], start=2):
        keys = set(preds)
        if keys != base_keys:
            missing = sorted(base_keys - keys)[:5]
            extra = sorted(keys - base_keys)[:5]
            raise ValidationError(
                f"member {m} key set mismatch; missing e.g. {missing}, unexpected e.g. {extra}"
            )

    if weighting == "per_model":
        model_w = [float(np.mean([likelihood(d, v) for v in preds.values()])) for preds in members]

    out = {}
    for key in members[0]:
        values = [preds[key] for preds in members]
        if all(v == values[0] for v in values[1:]):
            # exact idempotence/identity: agreeing members pass through unchanged
            out[key] = values[0]
            continue
        if weighting == "per_sample":
            weights = [likelihood(d, v) for v in values]
        else:
            weights = model_w
        total_w = sum(weights)
        if total_w == 0.0:
            out[key] = sum(values) / len(values)
        else:
            out[key] = sum(w * v for w, v in zip(weights, values)) / total_w
    return out


@dataclass(frozen=True)
class EnsembleSpec:
    """Which (model id, epoch) prediction sets feed each target's ensemble."""

    angle_members: tuple[tuple[str, int], ...]
    speed_members: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.angle_members or not self.speed_members:
            raise ValidationError("ensemble spec needs at least one member per target")


def load_ensemble_spec(path: Path) -> EnsembleSpec:
    with open(path) as f:
        raw = json.load(f)
    try:
        return EnsembleSpec(
            angle_members=tuple((str(m), int(e)) for m, e in raw["angle_members"]),
            speed_members=tuple((str(m), int(e)) for m, e in raw["speed_members"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{path}: malformed ensemble spec: {e}") from e


def save_ensemble_spec(path: Path, spec: EnsembleSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(
            {
                "angle_members": [list(m) for m in spec.angle_members],
                "speed_members": [list(m) for m in spec.speed_members],
            },
            f,
            indent=2,
        )
        f.write("\n")
    return path


class PredictionStore:
    """Directory of member prediction CSVs: <root>/<model_id>/epoch<k>.csv."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(self, model_id: str, epoch: int) -> Path:
        return self.root / model_id / f"epoch{epoch}.csv"

    def load(self, model_id: str, epoch: int) -> list:
        from .evaluate import read_prediction_csv

        path = self.path_for(model_id, epoch)
        if not path.is_file():
            raise ValidationError(f"missing ensemble member ({model_id}, epoch {epoch}): {path}")
        return read_prediction_csv(path)


def assemble(
    spec: EnsembleSpec,
    store: PredictionStore,
    angle_dist: BinnedDistribution,
    speed_dist: BinnedDistribution,
    weighting: str = "per_sample",
) -> list:
    """Combine the spec'd members into one merged (angle, speed) prediction list.

    Angle members are combined under the angle distribution, speed members
    under the speed distribution; both sides must cover the same keys.
    """
    from .core import TargetPair

    angle_members = []
    for model_id, epoch in spec.angle_members:
        angle_members.append({k: t.steering_angle for k, t in store.load(model_id, epoch)})
    speed_members = []
    for model_id, epoch in spec.speed_members:
        speed_members.append({k: t.speed for k, t in store.load(model_id, epoch)})

    combined_angle = combine(angle_members, angle_dist, weighting)
    combined_speed = combine(speed_members, speed_dist, weighting)
    if set(combined_angle) != set(combined_speed):
        raise ValidationError("angle and speed member key sets differ; cannot merge")
    return [
        (key, TargetPair(steering_angle=combined_angle[key], speed=combined_speed[key]))
        for key in sorted(combined_angle)
    ]
