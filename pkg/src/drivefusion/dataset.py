"""Dataset discovery, down-sampling, semantic CSV parsing, and sample streams.

On-disk layout (written by the synthetic generator, documented in the README):

    <root>/<route>/<chapter>/frames/<index>.jpg
    <root>/<route>/<chapter>/semantic.csv
    <root>/<route>/<chapter>/targets.csv
    <root>/splits.csv                          # route,chapter,split rows

Splits are assigned at chapter granularity only. Chapter ids must be unique
across the whole dataset because the prediction CSV format keys on
(chapter, frameIndex) without the route.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    N_FOLDER_DUMMIES,
    N_SEMANTIC_FEATURES,
    PAIR_OFFSET_FRAMES,
    SEMANTIC_COLUMNS,
    FramePair,
    NormalizationStats,
    SampleKey,
    SemanticFeatureVector,
    normalize_image,
)
from .errors import ConfigurationError, ParseError, SchemaError, ValidationError

SPLITS = ("train", "val", "test")

RESIZE_FILTERS = {
    "box": Image.BOX,
    "bilinear": Image.BILINEAR,
    "bicubic": Image.BICUBIC,
    "nearest": Image.NEAREST,
    "lanczos": Image.LANCZOS,
}

# Table-style presets: resolution plus the temporal stride that reproduces the
# published 1.6M -> 160k -> 80k -> 40k training-set scaling.
SAMPLING_PRESETS = {
    "full": ((1920, 1080), 1),
    "sample1": ((640, 360), 10),
    "sample2": ((320, 180), 20),
    "sample3": ((160, 90), 40),
    "tiny": ((64, 36), 1),
}

CACHE_VERSION = 1


@dataclass(frozen=True)
class SamplingPlan:
    """Spatial/temporal down-sampling parameters.

    ``pair_offset`` is the native-frame gap between the previous and current
    frame of a pair; it stays 4 (0.4 s at 10 fps) regardless of stride.
    """

    resolution: tuple[int, int]  # (width, height)
    temporal_stride: int
    pair_offset: int = PAIR_OFFSET_FRAMES
    resize_filter: str = "box"

    def __post_init__(self):
        if self.temporal_stride < 1:
            raise ConfigurationError(f"temporal_stride must be >= 1, got {self.temporal_stride}")
        if self.pair_offset < 1:
            raise ConfigurationError(f"pair_offset must be >= 1, got {self.pair_offset}")
        if self.resize_filter not in RESIZE_FILTERS:
            raise ConfigurationError(
                f"unknown resize_filter {self.resize_filter!r}; options: {sorted(RESIZE_FILTERS)}"
            )


def build_sampling_plan(
    preset: str,
    resolution: tuple[int, int] | None = None,
    temporal_stride: int | None = None,
    resize_filter: str = "box",
) -> SamplingPlan:
    """Resolve a named preset, or a fully explicit plan for preset='custom'."""
    if preset == "custom":
        if resolution is None or temporal_stride is None:
            raise ConfigurationError("custom preset requires explicit resolution and temporal_stride")
        return SamplingPlan(tuple(resolution), int(temporal_stride), resize_filter=resize_filter)
    if preset not in SAMPLING_PRESETS:
        raise ConfigurationError(
            f"unknown sampling preset {preset!r}; options: {sorted(SAMPLING_PRESETS) + ['custom']}"
        )
    res, stride = SAMPLING_PRESETS[preset]
    return SamplingPlan(res, stride, resize_filter=resize_filter)


@dataclass(frozen=True)
class DatasetLayout:
    """Path arithmetic for the documented on-disk layout."""

    root: Path

    def chapter_dir(self, route_id: str, chapter_id: str) -> Path:
        return self.root / route_id / chapter_id

    def frames_dir(self, route_id: str, chapter_id: str) -> Path:
        return self.chapter_dir(route_id, chapter_id) / "frames"

    def frame_path(self, key: SampleKey) -> Path:
        return self.frames_dir(key.route_id, key.chapter_id) / f"{key.frame_index:06d}.jpg"

    def semantic_csv(self, route_id: str, chapter_id: str) -> Path:
        return self.chapter_dir(route_id, chapter_id) / "semantic.csv"

    def targets_csv(self, route_id: str, chapter_id: str) -> Path:
        return self.chapter_dir(route_id, chapter_id) / "targets.csv"

    @property
    def splits_csv(self) -> Path:
        return self.root / "splits.csv"


@dataclass(frozen=True)
class ChapterInfo:
    route_id: str
    chapter_id: str
    frame_indices: tuple[int, ...]
    split: str

    @property
    def frame_count(self) -> int:
        return len(self.frame_indices)


def read_split_assignments(path: Path) -> dict[tuple[str, str], str]:
    if not path.is_file():
        raise ValidationError(f"missing split assignment file: {path}")
    out: dict[tuple[str, str], str] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for col in ("route", "chapter", "split"):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise SchemaError(f"splits.csv missing required column {col!r}")
        for i, row in enumerate(reader, start=2):
            split = row["split"].strip()
            if split not in SPLITS:
                raise ParseError(f"{path}:{i}: unknown split {split!r}")
            key = (row["route"].strip(), row["chapter"].strip())
            if key in out:
                raise ValidationError(f"chapter {key} assigned to more than one split")
            out[key] = split
    return out


def scan_chapters(layout: DatasetLayout) -> list[ChapterInfo]:
    """Discover chapters under the root, lexicographically ordered.

    Malformed chapters (missing CSVs or frames, unassigned split, duplicate
    chapter id) are collected and raised together so nothing is silently
    dropped.
    """
    root = layout.root
    if not root.is_dir():
        raise OSError(f"dataset root is not a readable directory: {root}")
    assignments = read_split_assignments(layout.splits_csv)

    problems: list[str] = []
    chapters: list[ChapterInfo] = []
    seen_chapter_ids: dict[str, str] = {}
    for route_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        route_id = route_dir.name
        for chapter_dir in sorted(p for p in route_dir.iterdir() if p.is_dir()):
            chapter_id = chapter_dir.name
            frames_dir = chapter_dir / "frames"
            missing = [
                name
                for name, p in [
                    ("frames/", frames_dir),
                    ("semantic.csv", chapter_dir / "semantic.csv"),
                    ("targets.csv", chapter_dir / "targets.csv"),
                ]
                if not p.exists()
            ]
            if missing:
                problems.append(f"{chapter_dir}: missing {', '.join(missing)}")
                continue
            if chapter_id in seen_chapter_ids:
                problems.append(
                    f"{chapter_dir}: chapter id {chapter_id!r} already used under route "
                    f"{seen_chapter_ids[chapter_id]!r}; chapter ids must be unique dataset-wide"
                )
                continue
            seen_chapter_ids[chapter_id] = route_id
            split = assignments.get((route_id, chapter_id))
            if split is None:
                problems.append(f"{chapter_dir}: no split assigned in splits.csv")
                continue
            indices = tuple(
                sorted(int(p.stem) for p in frames_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
            )
            if not indices:
                problems.append(f"{chapter_dir}: frames/ contains no images")
                continue
            chapters.append(ChapterInfo(route_id, chapter_id, indices, split))
    if problems:
        raise ValidationError("malformed dataset:\n  " + "\n  ".join(problems))
    return chapters


def folder_index_map(chapters: list[ChapterInfo]) -> dict[str, int]:
    """Stable route -> folder-dummy index mapping (sorted route order)."""
    routes = sorted({c.route_id for c in chapters})
    if len(routes) > N_FOLDER_DUMMIES:
        raise ConfigurationError(
            f"folder dummies support at most {N_FOLDER_DUMMIES} routes, found {len(routes)}"
        )
    return {r: i for i, r in enumerate(routes)}


def _parse_cell(raw: str | None) -> tuple[float, bool]:
    """Returns (value, missing). Empty/NaN cells impute to 0 with missing=True."""
    if raw is None:
        return 0.0, True
    text = raw.strip()
    if text == "" or text.lower() in ("nan", "na", "null", "none"):
        return 0.0, True
    value = float(text)  # caller wraps ValueError with row context
    if math.isnan(value):
        return 0.0, True
    return value, False


def parse_semantic_csv(
    path: Path,
    route_id: str,
    chapter_id: str,
    use_folder_dummies: bool = False,
    folder_index: int | None = None,
) -> dict[SampleKey, SemanticFeatureVector]:
    """Parse one chapter's semantic CSV into keyed feature vectors.

    Missing/empty/NaN cells become value 0 with missing_mask=True; the
    imputation is a constant, so a row never depends on any other row
    (in particular not on future frames).
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        missing_cols = [c for c in ("frameIndex",) + SEMANTIC_COLUMNS if c not in fields]
        if missing_cols:
            raise SchemaError(f"{path}: missing required columns: {', '.join(missing_cols)}")
        if use_folder_dummies:
            if folder_index is None or not (0 <= folder_index < N_FOLDER_DUMMIES):
                raise ConfigurationError(
                    f"use_folder_dummies requires folder_index in [0, {N_FOLDER_DUMMIES}), got {folder_index}"
                )
            onehot = tuple(1.0 if i == folder_index else 0.0 for i in range(N_FOLDER_DUMMIES))
        else:
            onehot = None

        out: dict[SampleKey, SemanticFeatureVector] = {}
        for line_no, row in enumerate(reader, start=2):
            try:
                frame_index = int(row["frameIndex"])
            except (ValueError, TypeError) as e:
                raise ParseError(f"{path}:{line_no}: bad frameIndex {row.get('frameIndex')!r}") from e
            values = []
            mask = []
            for col in SEMANTIC_COLUMNS:
                try:
                    v, m = _parse_cell(row[col])
                except ValueError as e:
                    raise ParseError(f"{path}:{line_no}: non-numeric cell in {col!r}: {row[col]!r}") from e
                values.append(v)
                mask.append(m)
            key = SampleKey(route_id, chapter_id, frame_index)
            out[key] = SemanticFeatureVector(tuple(values), tuple(mask), onehot)
    return out


def parse_targets_csv(path: Path, route_id: str, chapter_id: str) -> dict[SampleKey, tuple[float, float]]:
    """Parse frameIndex,canSteering,canSpeed rows into keyed (angle, speed)."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        missing_cols = [c for c in ("frameIndex", "canSteering", "canSpeed") if c not in fields]
        if missing_cols:
            raise SchemaError(f"{path}: missing required columns: {', '.join(missing_cols)}")
        out: dict[SampleKey, tuple[float, float]] = {}
        for line_no, row in enumerate(reader, start=2):
            try:
                key = SampleKey(route_id, chapter_id, int(row["frameIndex"]))
                out[key] = (float(row["canSteering"]), float(row["canSpeed"]))
            except (ValueError, TypeError) as e:
                raise ParseError(f"{path}:{line_no}: unparsable row {row!r}") from e
    return out


def load_image(path: Path, plan: SamplingPlan) -> np.ndarray:
    """Decode and resize one frame to (H, W, 3) uint8. Decode failures are hard errors."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        w, h = plan.resolution
        if rgb.size != (w, h):
            rgb = rgb.resize((w, h), RESIZE_FILTERS[plan.resize_filter])
        return np.asarray(rgb, dtype=np.uint8)


def load_frame_pair(
    key: SampleKey,
    plan: SamplingPlan,
    stats: NormalizationStats,
    layout: DatasetLayout,
) -> FramePair | None:
    """Load the normalized (previous, current) image pair for one anchor frame.

    Returns None when the previous frame does not exist (chapter warm-up);
    callers skip such anchors rather than fabricating data.
    """
    curr_path = layout.frame_path(key)
    if not curr_path.is_file():
        raise ValidationError(f"missing current frame: {curr_path}")
    prev_index = key.frame_index - plan.pair_offset
    if prev_index < 0:
        return None
    prev_key = SampleKey(key.route_id, key.chapter_id, prev_index)
    prev_path = layout.frame_path(prev_key)
    if not prev_path.is_file():
        return None
    return FramePair(
        previous=normalize_image(load_image(prev_path, plan), stats),
        current=normalize_image(load_image(curr_path, plan), stats),
        key=key,
    )


def eligible_anchor_indices(chapter: ChapterInfo, plan: SamplingPlan) -> list[int]:
    """Anchor frames with a valid previous frame, strided (every k-th eligible)."""
    present = set(chapter.frame_indices)
    eligible = [i for i in chapter.frame_indices if (i - plan.pair_offset) in present]
    return eligible[:: plan.temporal_stride]


@dataclass(frozen=True)
class SampleRef:
    """One pipeline sample: anchor key plus its previous-frame index."""

    key: SampleKey
    prev_index: int


@dataclass
class SplitStreams:
    train: list[SampleRef]
    val: list[SampleRef]
    test: list[SampleRef]

    def for_split(self, split: str) -> list[SampleRef]:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return getattr(self, split)


def make_split_streams(
    chapters: list[ChapterInfo],
    plan: SamplingPlan,
    seed: int = 0,
    shuffle_train: bool = False,
) -> SplitStreams:
    """Build deterministic per-split sample streams.

    Base order is (route, chapter, frame) lexicographic; with shuffle_train
    the training stream is permuted by a generator seeded from ``seed`` so the
    same seed always yields the same order.
    """
    per_split: dict[str, list[SampleRef]] = {s: [] for s in SPLITS}
    for chapter in sorted(chapters, key=lambda c: (c.route_id, c.chapter_id)):
        for anchor in eligible_anchor_indices(chapter, plan):
            key = SampleKey(chapter.route_id, chapter.chapter_id, anchor)
            per_split[chapter.split].append(SampleRef(key, anchor - plan.pair_offset))
    for split in SPLITS:
        if not per_split[split]:
            raise ValidationError(f"split {split!r} is empty; check splits.csv and strides")
    if shuffle_train:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(per_split["train"]))
        per_split["train"] = [per_split["train"][i] for i in order]
    return SplitStreams(per_split["train"], per_split["val"], per_split["test"])


# ---------------------------------------------------------------------------
# Preprocessed per-chapter cache
# ---------------------------------------------------------------------------


def cache_path(cache_root: Path, chapter: ChapterInfo) -> Path:
    return Path(cache_root) / chapter.route_id / f"{chapter.chapter_id}.npz"


def build_chapter_cache(
    layout: DatasetLayout,
    chapter: ChapterInfo,
    plan: SamplingPlan,
    cache_root: Path,
) -> Path:
    """Resize all of one chapter's frames and bundle them with parsed CSVs.

    The record is versioned; loaders refuse mismatched versions or plans.
    """
    sem = parse_semantic_csv(
        layout.semantic_csv(chapter.route_id, chapter.chapter_id),
        chapter.route_id,
        chapter.chapter_id,
    )
    targets = parse_targets_csv(
        layout.targets_csv(chapter.route_id, chapter.chapter_id), chapter.route_id, chapter.chapter_id
    )
    w, h = plan.resolution
    n = chapter.frame_count
    images = np.zeros((n, h, w, 3), dtype=np.uint8)
    sem_values = np.zeros((n, N_SEMANTIC_FEATURES), dtype=np.float32)
    sem_mask = np.zeros((n, N_SEMANTIC_FEATURES), dtype=bool)
    target_arr = np.zeros((n, 2), dtype=np.float64)
    for row, frame_index in enumerate(chapter.frame_indices):
        key = SampleKey(chapter.route_id, chapter.chapter_id, frame_index)
        images[row] = load_image(layout.frame_path(key), plan)
        if key not in sem:
            raise ValidationError(f"no semantic row for frame {frame_index} in {chapter.chapter_id}")
        if key not in targets:
            raise ValidationError(f"no target row for frame {frame_index} in {chapter.chapter_id}")
        vec = sem[key]
        sem_values[row] = vec.values
        sem_mask[row] = vec.missing_mask
        target_arr[row] = targets[key]

    out_path = cache_path(cache_root, chapter)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = out_path.with_suffix(".npz.tmp")
    with open(tmp_path, "wb") as f:
        np.savez_compressed(
            f,
            cache_version=np.int64(CACHE_VERSION),
            route_id=np.str_(chapter.route_id),
            chapter_id=np.str_(chapter.chapter_id),
            split=np.str_(chapter.split),
            width=np.int64(w),
            height=np.int64(h),
            resize_filter=np.str_(plan.resize_filter),
            frame_indices=np.asarray(chapter.frame_indices, dtype=np.int64),
            images=images,
            sem_values=sem_values,
            sem_mask=sem_mask,
            targets=target_arr,
        )
    tmp_path.replace(out_path)
    return out_path


def build_cache(
    layout: DatasetLayout,
    chapters: list[ChapterInfo],
    plan: SamplingPlan,
    cache_root: Path,
    workers: int = 1,
) -> list[Path]:
    """Build all chapter caches; parallel across chapters, output order fixed."""
    ordered = sorted(chapters, key=lambda c: (c.route_id, c.chapter_id))
    if workers <= 1:
        return [build_chapter_cache(layout, c, plan, cache_root) for c in ordered]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(build_chapter_cache, layout, c, plan, cache_root) for c in ordered]
        return [f.result() for f in futures]


@dataclass
class ChapterCache:
    route_id: str
    chapter_id: str
    split: str
    frame_indices: np.ndarray
    images: np.ndarray      # (n, H, W, 3) uint8
    sem_values: np.ndarray  # (n, 20) float32, imputed
    sem_mask: np.ndarray    # (n, 20) bool
    targets: np.ndarray     # (n, 2) float64 raw (angle, speed)

    def row_of(self, frame_index: int) -> int:
        row = int(np.searchsorted(self.frame_indices, frame_index))
        if row >= len(self.frame_indices) or self.frame_indices[row] != frame_index:
            raise ValidationError(f"frame {frame_index} not present in cached chapter {self.chapter_id}")
        return row


def load_chapter_cache(path: Path, plan: SamplingPlan | None = None) -> ChapterCache:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["cache_version"])
        if version != CACHE_VERSION:
            raise ValidationError(f"{path}: cache version {version} != supported {CACHE_VERSION}")
        if plan is not None:
            w, h = plan.resolution
            if int(z["width"]) != w or int(z["height"]) != h:
                raise ValidationError(
                    f"{path}: cached resolution {int(z['width'])}x{int(z['height'])} "
                    f"does not match plan {w}x{h}"
                )
        return ChapterCache(
            route_id=str(z["route_id"]),
            chapter_id=str(z["chapter_id"]),
            split=str(z["split"]),
            frame_indices=z["frame_indices"],
            images=z["images"],
            sem_values=z["sem_values"],
            sem_mask=z["sem_mask"],
            targets=z["targets"],
        )


@dataclass
class LoadedSamples:
    """Materialized arrays for a stream, aligned index-for-index with keys."""

    keys: list[SampleKey]
    images_prev: np.ndarray  # (N, H, W, 3) uint8
    images_curr: np.ndarray
    sem_prev: np.ndarray     # (N, D) float32, D in {0, 20, 47}
    sem_curr: np.ndarray
    targets: np.ndarray      # (N, 2) float64 raw units

    def __len__(self) -> int:
        return len(self.keys)


def load_samples(
    refs: list[SampleRef],
    cache_root: Path,
    use_folder_dummies: bool = False,
    folder_indices: dict[str, int] | None = None,
) -> LoadedSamples:
    """Gather (previous, current) image and semantic arrays for a stream.

    Chapter caches are read once each; sample order follows ``refs`` exactly.
    """
    caches: dict[tuple[str, str], ChapterCache] = {}
    n = len(refs)
    if n == 0:
        raise ValidationError("cannot load an empty stream")
    first = None
    images_prev = images_curr = sem_prev = sem_curr = None
    targets = np.zeros((n, 2), dtype=np.float64)
    keys = []
    for i, ref in enumerate(refs):
        ck = (ref.key.route_id, ref.key.chapter_id)
        if ck not in caches:
            p = Path(cache_root) / ck[0] / f"{ck[1]}.npz"
            if not p.is_file():
                raise ValidationError(f"chapter cache not found: {p} (run preprocess first)")
            caches[ck] = load_chapter_cache(p)
        cache = caches[ck]
        row_curr = cache.row_of(ref.key.frame_index)
        row_prev = cache.row_of(ref.prev_index)
        if first is None:
            h, w = cache.images.shape[1:3]
            sem_dim = N_SEMANTIC_FEATURES + (N_FOLDER_DUMMIES if use_folder_dummies else 0)
            images_prev = np.zeros((n, h, w, 3), dtype=np.uint8)
            images_curr = np.zeros((n, h, w, 3), dtype=np.uint8)
            sem_prev = np.zeros((n, sem_dim), dtype=np.float32)
            sem_curr = np.zeros((n, sem_dim), dtype=np.float32)
            first = cache
        images_prev[i] = cache.images[row_prev]
        images_curr[i] = cache.images[row_curr]
        sem_prev[i, :N_SEMANTIC_FEATURES] = cache.sem_values[row_prev]
        sem_curr[i, :N_SEMANTIC_FEATURES] = cache.sem_values[row_curr]
        if use_folder_dummies:
            if folder_indices is None or ref.key.route_id not in folder_indices:
                raise ConfigurationError("use_folder_dummies requires a folder index for every route")
            col = N_SEMANTIC_FEATURES + folder_indices[ref.key.route_id]
            sem_prev[i, col] = 1.0
            sem_curr[i, col] = 1.0
        targets[i] = cache.targets[row_curr]
        keys.append(ref.key)
    return LoadedSamples(keys, images_prev, images_curr, sem_prev, sem_curr, targets)
