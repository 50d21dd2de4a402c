"""Deterministic kinematic driving-data generator.

Produces chapters in the exact on-disk layout the ingest code reads: rendered
road frames at 10 fps, a semantic CSV whose columns are derived from the
route geometry, ground-truth steering/speed targets, and a chapter-level
split assignment. Steering is proportional to road curvature and the
curvature is drawn both in the lane geometry of the rendered frames and in
the lookahead-heading features, so the signal is recoverable from either
modality (more precisely from the map features, whose encoding is exact).

Everything derives from numpy Generators seeded per chapter, so a given
RouteSpec always produces byte-identical output.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import SEMANTIC_COLUMNS
from .errors import ConfigurationError

DT = 0.1  # native frame period, 10 fps
LOOKAHEADS_M = (1.0, 5.0, 10.0, 20.0, 50.0)
SEGMENT_LENGTH_M = 100.0
METERS_PER_DEG_LAT = 111320.0

_COL = {name: i for i, name in enumerate(SEMANTIC_COLUMNS)}

# roadside marker color per speed zone (km/h -> RGB)
ZONE_SIGN_COLORS = {30.0: (200, 40, 40), 50.0: (220, 180, 40), 80.0: (40, 180, 60)}
DEFAULT_SIGN_COLOR = (150, 150, 150)


@dataclass(frozen=True)
class RouteSpec:
    """Knobs for the generator. Identical spec -> byte-identical dataset."""

    seed: int = 0
    n_routes: int = 3
    n_chapters: int = 6
    chapter_frames: int = 600  # 60 s; real chapters are 5 min (3000 frames)
    render_resolution: tuple[int, int] = (64, 36)  # (width, height)
    val_fraction: float = 1 / 6
    test_fraction: float = 1 / 6
    steering_gain: float = 800.0  # degrees of CAN steering per 1/m of curvature
    kappa_theta: float = 0.15  # mean reversion rate of the curvature walk (1/s)
    kappa_sigma: float = 0.01  # diffusion of the curvature walk
    kappa_max: float = 0.06  # hard curvature bound (1/m)
    zone_limits: tuple[float, ...] = (30.0, 50.0, 80.0)
    zone_min_s: float = 20.0
    zone_max_s: float = 60.0
    speed_lag_s: float = 3.0  # first-order time constant toward the zone limit
    # None: enter the chapter below the first limit (guarantees a transient,
    # so even single-zone chapters have speed variance)
    initial_speed: float | None = None
    event_rate_per_min: float = 1.5  # per marker type (signal/yield/pedestrian/intersection)
    event_duration_s: tuple[float, float] = (2.0, 6.0)
    missing_fraction: float = 0.02  # fraction of semantic cells blanked
    base_latitude: float = 47.0
    base_longitude: float = 8.0
    jpeg_quality: int = 92

    def __post_init__(self):
        if self.n_chapters < 3:
            raise ConfigurationError("need at least 3 chapters to populate all three splits")
        if self.n_routes < 1 or self.n_routes > 27:
            raise ConfigurationError("n_routes must be in [1, 27] (folder one-hot width)")
        if self.chapter_frames < 10 or self.chapter_frames > 3000:
            raise ConfigurationError("chapter_frames must be in [10, 3000]")
        if not self.zone_limits:
            raise ConfigurationError("zone_limits must not be empty")


@dataclass
class ChapterTrace:
    """Per-frame simulation state for one chapter."""

    steering: np.ndarray  # degrees
    speed: np.ndarray  # km/h
    kappa: np.ndarray  # 1/m
    arc: np.ndarray  # cumulative meters at each frame
    limits: np.ndarray  # active zone limit (km/h)
    semantic: np.ndarray  # (n, 20) in SEMANTIC_COLUMNS order
    yaw_px: np.ndarray  # per-frame camera yaw jitter, pixels


def _zone_profile(spec: RouteSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Active and upcoming speed limits per frame (alternating zones)."""
    limits = np.empty(n)
    next_limits = np.empty(n)
    order = list(spec.zone_limits)
    zone_idx = int(rng.integers(len(order)))
    boundaries = []  # (start_frame, limit)
    frame = 0
    while frame < n:
        boundaries.append((frame, order[zone_idx % len(order)]))
        dur = rng.uniform(spec.zone_min_s, spec.zone_max_s)
        frame += max(1, int(round(dur / DT)))
        zone_idx += 1
    for b, (start, limit) in enumerate(boundaries):
        end = boundaries[b + 1][0] if b + 1 < len(boundaries) else n
        nxt = boundaries[b + 1][1] if b + 1 < len(boundaries) else limit
        limits[start:end] = limit
        next_limits[start:end] = nxt
    return limits, next_limits


def _event_windows(spec: RouteSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """0/1 marker track from Poisson event starts with random durations."""
    track = np.zeros(n)
    minutes = n * DT / 60.0
    count = int(rng.poisson(spec.event_rate_per_min * minutes))
    for _ in range(count):
        start = int(rng.integers(n))
        dur = int(round(rng.uniform(*spec.event_duration_s) / DT))
        track[start : min(n, start + dur)] = 1.0
    return track


def simulate_chapter(spec: RouteSpec, chapter_index: int) -> ChapterTrace:
    """Integrate the kinematics and derive all semantic columns for one chapter."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7, chapter_index]))
    n = spec.chapter_frames

    # curvature: mean-reverting bounded random walk
    kappa = np.empty(n)
    k = 0.0
    noise = rng.standard_normal(n)
    for i in range(n):
        kappa[i] = k
        k += -spec.kappa_theta * k * DT + spec.kappa_sigma * math.sqrt(DT) * noise[i]
        k = min(max(k, -spec.kappa_max), spec.kappa_max)

    limits, next_limits = _zone_profile(spec, n, rng)

    # speed: first-order lag toward the active limit
    speed = np.empty(n)
    v = spec.initial_speed if spec.initial_speed is not None else 0.75 * float(limits[0])
    for i in range(n):
        speed[i] = v
        v += (limits[i] - v) * DT / spec.speed_lag_s
        v = max(v, 0.0)

    # pose integration (SI internally; emitted units stay degrees / km/h)
    v_mps = speed / 3.6
    ds = v_mps * DT
    arc = np.concatenate([[0.0], np.cumsum(ds)[:-1]])
    psi = np.concatenate([[0.0], np.cumsum(kappa * ds)[:-1]])  # radians, unwrapped
    x = np.concatenate([[0.0], np.cumsum(v_mps * np.cos(psi) * DT)[:-1]])
    y = np.concatenate([[0.0], np.cumsum(v_mps * np.sin(psi) * DT)[:-1]])

    def heading_at_arc(s_query: np.ndarray) -> np.ndarray:
        # beyond-end queries hold the last heading (road continues straight)
        return np.interp(s_query, arc, psi)

    heading_deg = np.degrees(psi) % 360.0

    sem = np.zeros((n, len(SEMANTIC_COLUMNS)))
    sem[:, _COL["hereMmLatitude"]] = spec.base_latitude + y / METERS_PER_DEG_LAT
    sem[:, _COL["hereMmLongitude"]] = spec.base_longitude + x / (
        METERS_PER_DEG_LAT * math.cos(math.radians(spec.base_latitude))
    )
    sem[:, _COL["hereSpeedLimit"]] = limits
    sem[:, _COL["hereSpeedLimit_2"]] = next_limits

    # free-flow speed: causal EMA of the driven speed (typical achievable pace)
    freeflow = np.empty(n)
    ema = speed[0]
    alpha = DT / 2.0
    for i in range(n):
        ema += alpha * (speed[i] - ema)
        freeflow[i] = ema
    sem[:, _COL["hereFreeFlowSpeed"]] = freeflow

    sem[:, _COL["hereSignal"]] = _event_windows(spec, n, rng)
    sem[:, _COL["hereYield"]] = _event_windows(spec, n, rng)
    sem[:, _COL["herePedestrian"]] = _event_windows(spec, n, rng)
    intersection = _event_windows(spec, n, rng)
    sem[:, _COL["hereIntersection"]] = intersection
    sem[:, _COL["hereMmIntersection"]] = np.concatenate([[0.0], intersection[:-1]])

    # turn number: ordinal of the current intersection window, 0 outside
    turn_no = np.zeros(n)
    entered = 0
    inside = False
    for i in range(n):
        if intersection[i] and not inside:
            entered += 1
            inside = True
        elif not intersection[i]:
            inside = False
        turn_no[i] = (entered - 1) % 3 + 1 if inside else 0.0
    sem[:, _COL["hereTurnNumber"]] = turn_no

    seg_start = np.floor(arc / SEGMENT_LENGTH_M) * SEGMENT_LENGTH_M
    sem[:, _COL["hereSegmentEntryHeading"]] = np.degrees(heading_at_arc(seg_start)) % 360.0
    sem[:, _COL["hereSegmentExitHeading"]] = (
        np.degrees(heading_at_arc(seg_start + SEGMENT_LENGTH_M)) % 360.0
    )
    sem[:, _COL["hereCurvature"]] = kappa
    sem[:, _COL["hereCurrentHeading"]] = heading_deg
    for dist in LOOKAHEADS_M:
        sem[:, _COL[f"here{int(dist)}mHeading"]] = np.degrees(heading_at_arc(arc + dist)) % 360.0

    yaw_px = rng.standard_normal(n)
    return ChapterTrace(
        steering=spec.steering_gain * kappa,
        speed=speed,
        kappa=kappa,
        arc=arc,
        limits=limits,
        semantic=sem,
        yaw_px=yaw_px,
    )


def render_frame(
    trace: ChapterTrace, i: int, resolution: tuple[int, int], rng: np.random.Generator
) -> np.ndarray:
    """Rasterize one (H, W, 3) uint8 frame: sky, curved road, dashes, zone marker.

    The road centerline bends laterally with curvature, the center-dash phase
    advances with arc distance (a speed cue across the frame pair), and a small
    camera yaw jitter keeps the image-only curvature readout imperfect.
    """
    w, h = resolution
    kappa = trace.kappa[i]
    horizon = int(h * 0.42)
    rows = np.arange(h - horizon, dtype=np.float64)
    t = (rows + 1.0) / (h - horizon)  # 1 near the car, ->0 at the horizon

    img = np.empty((h, w, 3), dtype=np.float64)
    sky_t = np.linspace(0.0, 1.0, max(horizon, 1))[:, None]
    img[:horizon] = (np.array([130, 170, 230]) * (1 - sky_t) + np.array([200, 220, 245]) * sky_t)[
        :, None, :
    ]
    img[horizon:] = np.array([70.0, 140.0, 70.0])  # grass

    yaw = trace.yaw_px[i] * 0.02 * w
    center = w / 2.0 + yaw + (kappa * 6.5) * (1.0 - t) ** 2 * w
    half_width = (0.05 + 0.40 * t) * w
    cols = np.arange(w, dtype=np.float64)[None, :]
    road = np.abs(cols - center[:, None]) <= half_width[:, None]
    img[horizon:][road] = np.array([90.0, 90.0, 95.0])

    # dashed centerline; phase tied to distance traveled
    depth = 2.0 / t
    dash_on = ((trace.arc[i] + depth) % 6.0) < 3.0
    lane = (np.abs(cols - center[:, None]) <= np.maximum(0.8, 0.018 * w * t)[:, None]) & dash_on[:, None]
    img[horizon:][lane] = np.array([225.0, 215.0, 80.0])

    # roadside zone marker encodes the active speed limit by color
    color = ZONE_SIGN_COLORS.get(float(trace.limits[i]), DEFAULT_SIGN_COLOR)
    img[int(h * 0.50) : int(h * 0.62), int(w * 0.88) : int(w * 0.96)] = np.array(color, dtype=np.float64)

    img *= 1.0 + 0.08 * rng.standard_normal()
    img += 6.0 * rng.standard_normal(img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _write_semantic_csv(path: Path, sem: np.ndarray, missing: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("frameIndex",) + SEMANTIC_COLUMNS)
        for i in range(sem.shape[0]):
            row = [str(i)]
            for j in range(sem.shape[1]):
                row.append("" if missing[i, j] else f"{sem[i, j]:.6f}")
            writer.writerow(row)


def _write_targets_csv(path: Path, steering: np.ndarray, speed: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("frameIndex", "canSteering", "canSpeed"))
        for i in range(len(steering)):
            writer.writerow([i, f"{steering[i]:.6f}", f"{speed[i]:.6f}"])


def generate(spec: RouteSpec, out_root: Path) -> list[tuple[str, str, str]]:
    """Write the full dataset tree; returns (route, chapter, split) per chapter."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11]))
    order = split_rng.permutation(spec.n_chapters)
    n_val = max(1, int(round(spec.val_fraction * spec.n_chapters)))
    n_test = max(1, int(round(spec.test_fraction * spec.n_chapters)))
    if n_val + n_test >= spec.n_chapters:
        raise ConfigurationError("val/test fractions leave no training chapters")
    split_of = {}
    for pos, chapter_index in enumerate(order):
        if pos < n_val:
            split_of[int(chapter_index)] = "val"
        elif pos < n_val + n_test:
            split_of[int(chapter_index)] = "test"
        else:
            split_of[int(chapter_index)] = "train"

    records = []
    for k in range(spec.n_chapters):
        route_id = f"r{k % spec.n_routes:02d}"
        chapter_id = f"r{k % spec.n_routes:02d}ch{k:03d}"
        chapter_dir = out_root / route_id / chapter_id
        frames_dir = chapter_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)

        trace = simulate_chapter(spec, k)
        render_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 13, k]))
        for i in range(spec.chapter_frames):
            frame = render_frame(trace, i, spec.render_resolution, render_rng)
            Image.fromarray(frame).save(
                frames_dir / f"{i:06d}.jpg", quality=spec.jpeg_quality, subsampling=1
            )

        missing_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 17, k]))
        missing = missing_rng.random(trace.semantic.shape) < spec.missing_fraction
        _write_semantic_csv(chapter_dir / "semantic.csv", trace.semantic, missing)
        _write_targets_csv(chapter_dir / "targets.csv", trace.steering, trace.speed)
        records.append((route_id, chapter_id, split_of[k]))

    with open(out_root / "splits.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("route", "chapter", "split"))
        for route_id, chapter_id, split in records:
            writer.writerow((route_id, chapter_id, split))
    return records


def heading_probe_mse(semantic: np.ndarray, steering: np.ndarray) -> tuple[float, float]:
    """Learnability gate: linear fit of steering from lookahead-heading deltas.

    Returns (probe MSE, mean-predictor MSE). The probe regresses steering on
    the wrapped differences between each lookahead heading and the current
    heading; generated data must make this MSE far below the baseline before
    any network test is meaningful.
    """
    cur = semantic[:, _COL["hereCurrentHeading"]]
    feats = []
    for dist in LOOKAHEADS_M:
        delta = semantic[:, _COL[f"here{int(dist)}mHeading"]] - cur
        feats.append((delta + 180.0) % 360.0 - 180.0)
    design = np.column_stack(feats + [np.ones(len(cur))])
    coef, *_ = np.linalg.lstsq(design, steering, rcond=None)
    probe_mse = float(np.mean((design @ coef - steering) ** 2))
    baseline = float(np.mean((steering - steering.mean()) ** 2))
    return probe_mse, baseline
