"""End-to-end orchestration glue between the library modules and the CLI.

Each step is independently runnable and reads/writes only well-defined files
(dataset tree, chapter caches, checkpoints, CSVs), so subcommands can be
re-run or mixed across processes; the run directory is the isolation unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import ensemble as ens
from . import evaluate as ev
from .config import RunConfig, dump_run_config
from .core import NormalizationStats, SampleKey, SemanticFeatureVector, TargetPair, compute_target_stats
from .errors import ValidationError
from .model import build_fusion_model, load_checkpoint
from .synth import generate
from .train import EpochLog, TrainConfig, predict, train


@dataclass
class Prepared:
    layout: ds.DatasetLayout
    chapters: list[ds.ChapterInfo]
    plan: ds.SamplingPlan
    streams: ds.SplitStreams
    folder_map: dict[str, int]


def prepare(cfg: RunConfig) -> Prepared:
    layout = ds.DatasetLayout(Path(cfg.dataset_root))
    chapters = ds.scan_chapters(layout)
    plan = cfg.sampling_plan()
    streams = ds.make_split_streams(chapters, plan, seed=cfg.seed)
    return Prepared(layout, chapters, plan, streams, ds.folder_index_map(chapters))


def run_gen_synth(cfg: RunConfig) -> list[tuple[str, str, str]]:
    records = generate(cfg.synth_spec(), Path(cfg.dataset_root))
    dump_run_config(cfg, Path(cfg.dataset_root) / "gen_config.cfg")
    return records


def _load_chapter_targets(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return z["frame_indices"], z["targets"]


def stream_truth(refs: list[ds.SampleRef], cache_root: Path) -> list[tuple[SampleKey, TargetPair]]:
    """Ground-truth (angle, speed) at each anchor frame, without loading images."""
    per_chapter: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    out = []
    for ref in refs:
        ck = (ref.key.route_id, ref.key.chapter_id)
        if ck not in per_chapter:
            path = Path(cache_root) / ck[0] / f"{ck[1]}.npz"
            if not path.is_file():
                raise ValidationError(f"chapter cache not found: {path} (run preprocess first)")
            per_chapter[ck] = _load_chapter_targets(path)
        indices, targets = per_chapter[ck]
        row = int(np.searchsorted(indices, ref.key.frame_index))
        if row >= len(indices) or indices[row] != ref.key.frame_index:
            raise ValidationError(f"frame {ref.key.frame_index} missing from cache for {ck[1]}")
        out.append((ref.key, TargetPair(float(targets[row, 0]), float(targets[row, 1]))))
    return out


def run_preprocess(cfg: RunConfig) -> dict[str, Path]:
    """Build per-chapter caches and export per-split ground-truth CSVs."""
    prepared = prepare(cfg)
    cache_root = cfg.resolved_cache_dir()
    ds.build_cache(prepared.layout, prepared.chapters, prepared.plan, cache_root, workers=cfg.workers)
    outputs: dict[str, Path] = {"cache": cache_root}
    for split in ds.SPLITS:
        truth = stream_truth(prepared.streams.for_split(split), cache_root)
        outputs[split] = ev.write_prediction_csv(cache_root / f"truth_{split}.csv", truth)
    dump_run_config(cfg, cache_root / "preprocess_config.cfg")
    return outputs


def training_stats(cfg: RunConfig, prepared: Prepared, cache_root: Path) -> NormalizationStats:
    """Target normalization stats from the training split only."""
    truth = stream_truth(prepared.streams.train, cache_root)
    mean, std = cfg.image_stats()
    return compute_target_stats([t for _, t in truth], mean, std)


def load_split_samples(cfg: RunConfig, prepared: Prepared, split: str) -> ds.LoadedSamples:
    return ds.load_samples(
        prepared.streams.for_split(split),
        cfg.resolved_cache_dir(),
        use_folder_dummies=cfg.use_folder_dummies,
        folder_indices=prepared.folder_map,
    )


def run_train(cfg: RunConfig, clock=None, log_fn=None) -> list[tuple[Path, EpochLog]]:
    prepared = prepare(cfg)
    cache_root = cfg.resolved_cache_dir()
    stats = training_stats(cfg, prepared, cache_root)
    samples = load_split_samples(cfg, prepared, "train")
    model = build_fusion_model(cfg.fusion_config())
    out_dir = Path(cfg.out)
    dump_run_config(cfg, out_dir / "run_config.cfg")
    kwargs = {} if clock is None else {"clock": clock}
    return train(model, samples, stats, cfg.train_config(), out_dir, log_fn=log_fn, **kwargs)


def run_predict(cfg: RunConfig, checkpoint: Path, split: str, out_csv: Path) -> Path:
    prepared = prepare(cfg)
    samples = load_split_samples(cfg, prepared, split)
    predictions = predict(load_checkpoint(checkpoint), samples, batch_size=max(cfg.batch_size, 32))
    return ev.write_prediction_csv(out_csv, predictions)


def fit_target_distributions(
    cfg: RunConfig, prepared: Prepared | None = None
) -> tuple[ens.BinnedDistribution, ens.BinnedDistribution]:
    """Angle/speed binned distributions over TRAINING targets only."""
    prepared = prepared or prepare(cfg)
    truth = stream_truth(prepared.streams.train, cfg.resolved_cache_dir())
    angles = [t.steering_angle for _, t in truth]
    speeds = [t.speed for _, t in truth]
    return ens.fit_distribution(angles, cfg.angle_bins), ens.fit_distribution(speeds, cfg.speed_bins)


def run_ensemble(cfg: RunConfig, spec_path: Path, store_dir: Path, out_csv: Path) -> Path:
    spec = ens.load_ensemble_spec(spec_path)
    angle_dist, speed_dist = fit_target_distributions(cfg)
    combined = ens.assemble(
        spec, ens.PredictionStore(store_dir), angle_dist, speed_dist, weighting=cfg.ensemble_weighting
    )
    return ev.write_prediction_csv(out_csv, combined)


def semantic_vectors_for_keys(
    cache_root: Path, keys: list[ev.PredKey]
) -> dict[ev.PredKey, SemanticFeatureVector]:
    """Rebuild per-sample feature vectors from chapter caches for zone labeling."""
    chapter_paths = {p.stem: p for p in Path(cache_root).glob("*/*.npz")}
    out: dict[ev.PredKey, SemanticFeatureVector] = {}
    loaded: dict[str, ds.ChapterCache] = {}
    for chapter_id, frame_index in keys:
        if chapter_id not in loaded:
            if chapter_id not in chapter_paths:
                raise ValidationError(f"no cached chapter {chapter_id!r} under {cache_root}")
            loaded[chapter_id] = ds.load_chapter_cache(chapter_paths[chapter_id])
        cache = loaded[chapter_id]
        row = cache.row_of(frame_index)
        out[(chapter_id, frame_index)] = SemanticFeatureVector(
            tuple(float(v) for v in cache.sem_values[row]),
            tuple(bool(b) for b in cache.sem_mask[row]),
        )
    return out


def run_evaluate(
    cfg: RunConfig,
    pred_csv: Path,
    truth_csv: Path,
    out_dir: Path,
    zones: bool = False,
) -> ev.MetricReport:
    pred = ev.read_prediction_csv(pred_csv)
    truth = ev.read_prediction_csv(truth_csv)
    if zones:
        labels = semantic_vectors_for_keys(cfg.resolved_cache_dir(), [k for k, _ in truth])
        report = ev.per_zone_report(pred, truth, labels, cfg.turn_threshold_deg)
    else:
        report = ev.mse(pred, truth)
    out_dir = Path(out_dir)
    ev.write_metrics_csv(out_dir / "metrics.csv", report)
    (out_dir / "metrics.txt").write_text(ev.format_metric_table(report) + "\n")
    return report
