"""MSE metrics in raw units, zone labeling, and the prediction CSV format.

The combined score is the plain sum of angle MSE (deg^2) and speed MSE
((km/h)^2). Prediction CSVs key rows on (chapter, frameIndex); route ids do
not appear, which is why chapter ids must be unique dataset-wide.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SEMANTIC_COLUMNS, SampleKey, TargetPair, SemanticFeatureVector
from .errors import ParseError, ValidationError

# A prediction row key: (chapter_id, frame_index).
PredKey = tuple[str, int]

PREDICTION_HEADER = ("chapter", "frameIndex", "canSteering", "canSpeed")

ZONE_LABELS = (
    "Zone30",
    "Zone50",
    "Zone80",
    "Right",
    "Straight",
    "Left",
    "Pedestrian",
    "TrafficLight",
    "Yield",
)

SPEED_LIMIT_ZONES = {30.0: "Zone30", 50.0: "Zone50", 80.0: "Zone80"}

_COL = {name: i for i, name in enumerate(SEMANTIC_COLUMNS)}

DEFAULT_TURN_THRESHOLD_DEG = 15.0


def as_pred_key(key) -> PredKey:
    if isinstance(key, SampleKey):
        return (key.chapter_id, key.frame_index)
    chapter, frame = key
    return (str(chapter), int(frame))


@dataclass(frozen=True)
class ZoneReport:
    mse_angle: float
    mse_speed: float
    combined: float
    count: int


@dataclass(frozen=True)
class MetricReport:
    mse_angle: float
    mse_speed: float
    combined: float
    count: int
    zones: dict = field(default_factory=dict)  # label -> ZoneReport; absent zones omitted


def _aligned_errors(pred: list, truth: list) -> tuple[list[PredKey], np.ndarray, np.ndarray]:
    pred_map = {as_pred_key(k): t for k, t in pred}
    truth_map = {as_pred_key(k): t for k, t in truth}
    if not pred_map or not truth_map:
        raise ValidationError("mse needs non-empty prediction and truth lists")
    if set(pred_map) != set(truth_map):
        missing = sorted(set(truth_map) - set(pred_map))[:5]
        extra = sorted(set(pred_map) - set(truth_map))[:5]
        raise ValidationError(f"key mismatch; missing predictions e.g. {missing}, unexpected e.g. {extra}")
    keys = sorted(pred_map)
    angle_err = np.asarray(
        [pred_map[k].steering_angle - truth_map[k].steering_angle for k in keys], dtype=np.float64
    )
    speed_err = np.asarray([pred_map[k].speed - truth_map[k].speed for k in keys], dtype=np.float64)
    return keys, angle_err, speed_err


def mse(pred: list, truth: list) -> MetricReport:
    """Overall mean squared error per target, in raw units; combined = sum."""
    _, angle_err, speed_err = _aligned_errors(pred, truth)
    mse_angle = float(np.mean(angle_err**2))
    mse_speed = float(np.mean(speed_err**2))
    return MetricReport(
        mse_angle=mse_angle,
        mse_speed=mse_speed,
        combined=mse_angle + mse_speed,
        count=len(angle_err),
    )


def mean_predictor_baseline(train_targets: list[TargetPair], truth: list) -> MetricReport:
    """Score of always predicting the training-set mean (angle, speed)."""
    if not train_targets:
        raise ValidationError("baseline needs training targets")
    a = float(np.mean([t.steering_angle for t in train_targets]))
    s = float(np.mean([t.speed for t in train_targets]))
    pred = [(k, TargetPair(a, s)) for k, _ in truth]
    return mse(pred, truth)


def wrap_degrees(delta: float) -> float:
    """Wrap a heading difference into [-180, 180)."""
    return (delta + 180.0) % 360.0 - 180.0


def label_zones(
    sem: SemanticFeatureVector,
    turn_threshold_deg: float = DEFAULT_TURN_THRESHOLD_DEG,
) -> frozenset[str]:
    """Non-exclusive road-context labels for one sample.

    Zone30/50/80 come from the speed limit; Pedestrian/TrafficLight/Yield
    from nonzero, non-missing indicator features; turn direction from the
    wrapped (10 m lookahead - current) heading difference, positive = Right.
    An all-missing row yields the empty set.
    """
    values = sem.values
    mask = sem.missing_mask
    if all(mask):
        return frozenset()
    labels = set()

    def present(col: str) -> bool:
        i = _COL[col]
        return (not mask[i]) and values[i] != 0.0

    if not mask[_COL["hereSpeedLimit"]]:
        zone = SPEED_LIMIT_ZONES.get(values[_COL["hereSpeedLimit"]])
        if zone:
            labels.add(zone)
    if present("herePedestrian"):
        labels.add("Pedestrian")
    if present("hereSignal"):
        labels.add("TrafficLight")
    if present("hereYield"):
        labels.add("Yield")
    i10, icur = _COL["here10mHeading"], _COL["hereCurrentHeading"]
    if not mask[i10] and not mask[icur]:
        delta = wrap_degrees(values[i10] - values[icur])
        if delta > turn_threshold_deg:
            labels.add("Right")
        elif delta < -turn_threshold_deg:
            labels.add("Left")
        else:
            labels.add("Straight")
    return frozenset(labels)


def per_zone_report(
    pred: list,
    truth: list,
    labels: dict,
    turn_threshold_deg: float = DEFAULT_TURN_THRESHOLD_DEG,
) -> MetricReport:
    """Overall report plus per-zone MSE over the samples carrying each label.

    ``labels`` maps prediction keys to label sets (or SemanticFeatureVectors,
    which are labeled here). Zones with no samples are omitted, not zeroed.
    """
    keys, angle_err, speed_err = _aligned_errors(pred, truth)
    label_map = {}
    for k, v in labels.items():
        pk = as_pred_key(k)
        label_map[pk] = label_zones(v, turn_threshold_deg) if isinstance(v, SemanticFeatureVector) else v
    missing = [k for k in keys if k not in label_map]
    if missing:
        raise ValidationError(f"no zone labels for keys e.g. {missing[:5]}")

    zones = {}
    sq_angle = angle_err**2
    sq_speed = speed_err**2
    for zone in ZONE_LABELS:
        sel = np.asarray([zone in label_map[k] for k in keys], dtype=bool)
        n = int(sel.sum())
        if n == 0:
            continue
        za = float(np.mean(sq_angle[sel]))
        zs = float(np.mean(sq_speed[sel]))
        zones[zone] = ZoneReport(mse_angle=za, mse_speed=zs, combined=za + zs, count=n)

    mse_angle = float(np.mean(sq_angle))
    mse_speed = float(np.mean(sq_speed))
    return MetricReport(
        mse_angle=mse_angle,
        mse_speed=mse_speed,
        combined=mse_angle + mse_speed,
        count=len(keys),
        zones=zones,
    )


# ---------------------------------------------------------------------------
# Prediction CSV exchange format
# ---------------------------------------------------------------------------


def write_prediction_csv(path: Path, predictions: list) -> Path:
    """Write keyed predictions ordered by (chapter, frameIndex), 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted((as_pred_key(k), t) for k, t in predictions)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTION_HEADER)
        for (chapter, frame), t in rows:
            writer.writerow([chapter, frame, f"{t.steering_angle:.6f}", f"{t.speed:.6f}"])
    return path


def read_prediction_csv(path: Path) -> list[tuple[PredKey, TargetPair]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected header {PREDICTION_HEADER}") from None
        if tuple(header) != PREDICTION_HEADER:
            raise ParseError(f"{path}: unexpected header {header}, expected {list(PREDICTION_HEADER)}")
        out: list[tuple[PredKey, TargetPair]] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}:{line_no}: expected 4 columns, got {len(row)}")
            try:
                out.append(
                    ((row[0], int(row[1])), TargetPair(steering_angle=float(row[2]), speed=float(row[3])))
                )
            except ValueError as e:
                raise ParseError(f"{path}:{line_no}: unparsable row {row}") from e
    return out


def write_metrics_csv(path: Path, report: MetricReport) -> Path:
    """Machine-readable metric table: one overall row plus one row per zone."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scope", "mse_angle", "mse_speed", "combined", "count"])
        writer.writerow(
            ["overall", f"{report.mse_angle:.6f}", f"{report.mse_speed:.6f}", f"{report.combined:.6f}", report.count]
        )
        for zone in ZONE_LABELS:
            if zone in report.zones:
                z = report.zones[zone]
                writer.writerow(
                    [zone, f"{z.mse_angle:.6f}", f"{z.mse_speed:.6f}", f"{z.combined:.6f}", z.count]
                )
    return path


def read_metrics_csv(path: Path) -> MetricReport:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        overall = None
        zones = {}
        for i, row in enumerate(reader, start=2):
            try:
                scope = row["scope"]
                values = (
                    float(row["mse_angle"]),
                    float(row["mse_speed"]),
                    float(row["combined"]),
                    int(row["count"]),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}:{i}: unparsable metrics row {row}") from e
            if scope == "overall":
                overall = values
            else:
                zones[scope] = ZoneReport(*values)
        if overall is None:
            raise ParseError(f"{path}: no 'overall' row found")
    return MetricReport(overall[0], overall[1], overall[2], overall[3], zones=zones)


def format_metric_table(report: MetricReport) -> str:
    """Human-readable fixed-width metric table."""
    lines = [f"{'scope':<14}{'MSE angle':>14}{'MSE speed':>12}{'combined':>14}{'n':>9}"]
    lines.append(
        f"{'overall':<14}{report.mse_angle:>14.3f}{report.mse_speed:>12.3f}{report.combined:>14.3f}{report.count:>9}"
    )
    for zone in ZONE_LABELS:
        if zone in report.zones:
            z = report.zones[zone]
            lines.append(f"{zone:<14}{z.mse_angle:>14.3f}{z.mse_speed:>12.3f}{z.combined:>14.3f}{z.count:>9}")
    return "\n".join(lines)
