"""Joint-MSE training loop: Adam, per-epoch checkpoints, loss-curve logging.

The optimization is strictly serial and deterministic for a fixed seed (data
order, dropout, and init all derive from it). Wall-clock timing comes from an
injectable clock so reproducibility checks can pin it.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import NormalizationStats, SampleKey, TargetPair, denormalize_target
from .dataset import LoadedSamples
from .errors import ConfigurationError, NumericError, ParseError, ValidationError
from .model import FusionModel, LoadedCheckpoint, ModelOutput, load_checkpoint, save_checkpoint

PAPER_LEARNING_RATE = 1e-4
PAPER_BETAS = (0.9, 0.999)
PAPER_WEIGHT_DECAY = 0.0
PAPER_BATCH_SIZES = (8, 32, 64)

LOSS_LOG_HEADER = ("epoch", "total_loss", "angle_mse", "speed_mse", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = PAPER_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    paper_faithful: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.paper_faithful:
            if self.learning_rate != PAPER_LEARNING_RATE:
                raise ConfigurationError(f"paper_faithful pins learning_rate to {PAPER_LEARNING_RATE}")
            if (self.beta1, self.beta2) != PAPER_BETAS:
                raise ConfigurationError(f"paper_faithful pins betas to {PAPER_BETAS}")
            if self.weight_decay != PAPER_WEIGHT_DECAY:
                raise ConfigurationError("paper_faithful pins weight_decay to 0")
            if self.batch_size not in PAPER_BATCH_SIZES:
                raise ConfigurationError(f"paper_faithful batch_size must be in {PAPER_BATCH_SIZES}")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    total_loss: float
    angle_mse: float
    speed_mse: float
    seconds: float


def joint_loss_components(
    pred: ModelOutput, target_norm: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean squared error per target, plus their sum.

    ``target_norm`` is (B, 2) in normalized space: column 0 angle, column 1 speed.
    """
    if not (torch.isfinite(pred.angle).all() and torch.isfinite(pred.speed).all()):
        raise NumericError("non-finite predictions in loss")
    if not torch.isfinite(target_norm).all():
        raise NumericError("non-finite targets in loss")
    angle_term = torch.mean((pred.angle - target_norm[:, 0]) ** 2)
    speed_term = torch.mean((pred.speed - target_norm[:, 1]) ** 2)
    return angle_term + speed_term, angle_term, speed_term


def joint_loss(pred: ModelOutput, target_norm: torch.Tensor) -> torch.Tensor:
    total, _, _ = joint_loss_components(pred, target_norm)
    return total


def make_optimizer(model: FusionModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def _image_batch(images: np.ndarray, stats: NormalizationStats, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) uint8 -> channel-normalized (B, 3, H, W) tensor."""
    arr = images.astype(np.float32) / 255.0
    arr = (arr - np.asarray(stats.image_channel_mean, dtype=np.float32)) / np.asarray(
        stats.image_channel_std, dtype=np.float32
    )
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def normalized_targets(samples: LoadedSamples, stats: NormalizationStats) -> np.ndarray:
    out = np.empty_like(samples.targets)
    out[:, 0] = (samples.targets[:, 0] - stats.angle_mean) / stats.angle_std
    out[:, 1] = (samples.targets[:, 1] - stats.speed_mean) / stats.speed_std
    return out


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches over n samples; a trailing singleton batch is dropped."""
    slices = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(slices) > 1 and (slices[-1].stop - slices[-1].start) == 1:
        slices.pop()
    return slices


def train(
    model: FusionModel,
    train_samples: LoadedSamples,
    stats: NormalizationStats,
    cfg: TrainConfig,
    out_dir: Path,
    clock=time.perf_counter,
    log_fn=None,
) -> list[tuple[Path, EpochLog]]:
    """Run the optimization loop; one checkpoint per epoch plus a loss-log CSV.

    On divergence (non-finite loss) training aborts with a NumericError; all
    checkpoints from completed epochs stay on disk.
    """
    if len(train_samples) == 0:
        raise ValidationError("training stream is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats.validate()

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    targets_norm = normalized_targets(train_samples, stats)
    use_sem = model.config.use_semantic

    results: list[tuple[Path, EpochLog]] = []
    logs: list[EpochLog] = []
    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        epoch_start = clock()
        model.train()
        order = rng.permutation(n)
        angle_sum = 0.0
        speed_sum = 0.0
        seen = 0
        for sl in batch_slices(n, cfg.batch_size):
            idx = order[sl]
            img_prev = _image_batch(train_samples.images_prev[idx], stats)
            img_curr = _image_batch(train_samples.images_curr[idx], stats)
            sem_prev = torch.from_numpy(train_samples.sem_prev[idx]) if use_sem else None
            sem_curr = torch.from_numpy(train_samples.sem_curr[idx]) if use_sem else None
            target = torch.from_numpy(targets_norm[idx].astype(np.float32))

            optimizer.zero_grad()
            pred, _ = model(img_prev, img_curr, sem_prev, sem_curr)
            total, angle_term, speed_term = joint_loss_components(pred, target)
            if not torch.isfinite(total):
                raise NumericError(
                    f"training diverged at epoch {epoch}; last good checkpoint: "
                    f"{results[-1][0] if results else 'none'}"
                )
            total.backward()
            optimizer.step()

            bs = len(idx)
            angle_sum += float(angle_term.detach()) * bs
            speed_sum += float(speed_term.detach()) * bs
            seen += bs

        angle_mse = angle_sum / seen
        speed_mse = speed_sum / seen
        log = EpochLog(
            epoch=epoch,
            total_loss=angle_mse + speed_mse,
            angle_mse=angle_mse,
            speed_mse=speed_mse,
            seconds=clock() - epoch_start,
        )
        logs.append(log)
        ckpt = save_checkpoint(
            out_dir / f"model_epoch{epoch}.ckpt",
            model,
            stats,
            epoch,
            optimizer=optimizer,
            extra={"train_config": asdict(cfg)},
        )
        write_loss_log(out_dir / "loss_log.csv", logs)
        if log_fn is not None:
            log_fn(log)
        results.append((ckpt, log))
    return results


def predict(
    checkpoint: Path | LoadedCheckpoint,
    samples: LoadedSamples,
    batch_size: int = 64,
) -> list[tuple[SampleKey, TargetPair]]:
    """Eval-mode denormalized predictions, in stream order."""
    loaded = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_checkpoint(checkpoint)
    model, stats = loaded.model, loaded.stats
    use_sem = model.config.use_semantic
    if use_sem and samples.sem_curr.shape[1] != model.config.semantic_dim:
        raise ValidationError(
            f"stream semantic width {samples.sem_curr.shape[1]} does not match "
            f"checkpoint semantic_dim {model.config.semantic_dim}"
        )
    w, h = model.config.input_resolution
    if samples.images_curr.shape[1:3] != (h, w):
        raise ValidationError(
            f"stream resolution {samples.images_curr.shape[2]}x{samples.images_curr.shape[1]} "
            f"does not match checkpoint {w}x{h}"
        )
    model.eval()
    out: list[tuple[SampleKey, TargetPair]] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            sl = slice(start, min(start + batch_size, len(samples)))
            img_prev = _image_batch(samples.images_prev[sl], stats)
            img_curr = _image_batch(samples.images_curr[sl], stats)
            sem_prev = torch.from_numpy(samples.sem_prev[sl]) if use_sem else None
            sem_curr = torch.from_numpy(samples.sem_curr[sl]) if use_sem else None
            pred, _ = model(img_prev, img_curr, sem_prev, sem_curr)
            for k, a, s in zip(samples.keys[sl], pred.angle.tolist(), pred.speed.tolist()):
                out.append((k, denormalize_target((a, s), stats)))
    return out


def write_loss_log(path: Path, logs: list[EpochLog]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_HEADER)
        for log in logs:
            writer.writerow(
                [
                    log.epoch,
                    f"{log.total_loss:.9f}",
                    f"{log.angle_mse:.9f}",
                    f"{log.speed_mse:.9f}",
                    f"{log.seconds:.3f}",
                ]
            )
    return path


def read_loss_log(path: Path) -> list[EpochLog]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LOSS_LOG_HEADER:
            raise ParseError(f"{path}: unexpected loss log header {reader.fieldnames}")
        out = []
        for i, row in enumerate(reader, start=2):
            try:
                out.append(
                    EpochLog(
                        epoch=int(row["epoch"]),
                        total_loss=float(row["total_loss"]),
                        angle_mse=float(row["angle_mse"]),
                        speed_mse=float(row["speed_mse"]),
                        seconds=float(row["seconds"]),
                    )
                )
            except ValueError as e:
                raise ParseError(f"{path}:{i}: unparsable loss log row") from e
    return out
