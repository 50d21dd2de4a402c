"""Run configuration: a flat key = value text file plus env/CLI overrides.

Precedence: CLI flags > DRIVEFUSION_<KEY> environment variables > config file
> built-in defaults. The effective configuration is archived next to every
subcommand's outputs, so any run is reproducible from its run directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .core import N_FOLDER_DUMMIES, N_SEMANTIC_FEATURES, NormalizationStats
from .dataset import SamplingPlan, build_sampling_plan
from .errors import ConfigurationError
from .model import BackboneSpec, FusionConfig
from .synth import RouteSpec
from .train import TrainConfig

ENV_PREFIX = "DRIVEFUSION_"


@dataclass
class RunConfig:
    # run
    mode: str = "desk"  # desk | paper_faithful
    seed: int = 42
    dataset_root: str = "data/synth"
    out: str = "runs/run1"
    cache_dir: str = ""  # empty -> <out>/cache

    # sampling
    preset: str = "tiny"  # full | sample1 | sample2 | sample3 | tiny | custom
    resolution: str = ""  # WxH, custom preset only
    stride: int = 0  # custom preset only
    resize_filter: str = "box"

    # image channel stats (the provided defaults are configuration, not code)
    image_mean: str = "0.5,0.5,0.5"
    image_std: str = "0.25,0.25,0.25"

    # model
    backbone: str = "desk"  # desk | resnet34 | resnet152
    pretrained: bool = False
    desk_channels: str = "16,32,64,64"
    use_semantic: bool = True
    use_folder_dummies: bool = False
    lstm_hidden: int = 128
    lstm_bypass: str = "semantic"  # semantic | image | none
    fc_hidden: str = "256,128"
    head_hidden: str = "1024,512,256"
    head_dropout: float = 0.10

    # training
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 5
    workers: int = 1

    # ensemble
    angle_bins: int = 100
    speed_bins: int = 30
    ensemble_weighting: str = "per_sample"  # per_sample | per_model

    # evaluation
    turn_threshold_deg: float = 15.0

    # synthetic data generation
    synth_routes: int = 3
    synth_chapters: int = 6
    synth_chapter_frames: int = 600
    synth_missing_fraction: float = 0.02
    synth_render_resolution: str = "64x36"

    # ------------------------------------------------------------------
    # derived objects
    # ------------------------------------------------------------------

    @property
    def paper_faithful(self) -> bool:
        if self.mode not in ("desk", "paper_faithful"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        return self.mode == "paper_faithful"

    def sampling_plan(self) -> SamplingPlan:
        res = _parse_resolution(self.resolution) if self.resolution else None
        stride = self.stride if self.stride > 0 else None
        return build_sampling_plan(self.preset, res, stride, self.resize_filter)

    def semantic_dim(self) -> int:
        if not self.use_semantic:
            return 0
        return N_SEMANTIC_FEATURES + (N_FOLDER_DUMMIES if self.use_folder_dummies else 0)

    def fusion_config(self) -> FusionConfig:
        plan = self.sampling_plan()
        return FusionConfig(
            backbone=BackboneSpec(
                name=self.backbone,
                pretrained=self.pretrained,
                desk_channels=_parse_int_tuple(self.desk_channels, "desk_channels"),
            ),
            input_resolution=plan.resolution,
            use_semantic=self.use_semantic,
            semantic_dim=self.semantic_dim(),
            fc_hidden=_parse_int_tuple(self.fc_hidden, "fc_hidden"),
            lstm_hidden=self.lstm_hidden,
            head_hidden=_parse_int_tuple(self.head_hidden, "head_hidden"),
            head_dropout=self.head_dropout,
            lstm_bypass=self.lstm_bypass,
            init_seed=self.seed,
            paper_faithful=self.paper_faithful,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            paper_faithful=self.paper_faithful,
        )

    def image_stats(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        return _parse_float3(self.image_mean, "image_mean"), _parse_float3(self.image_std, "image_std")

    def placeholder_stats(self) -> NormalizationStats:
        """Image stats from config with unit target stats (pre-training use)."""
        mean, std = self.image_stats()
        return NormalizationStats(mean, std, 0.0, 1.0, 0.0, 1.0).validate()

    def synth_spec(self) -> RouteSpec:
        return RouteSpec(
            seed=self.seed,
            n_routes=self.synth_routes,
            n_chapters=self.synth_chapters,
            chapter_frames=self.synth_chapter_frames,
            render_resolution=_parse_resolution(self.synth_render_resolution),
            missing_fraction=self.synth_missing_fraction,
        )

    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.out) / "cache"


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError as e:
        raise ConfigurationError(f"resolution must look like 320x180, got {text!r}") from e


def _parse_int_tuple(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigurationError(f"{key} must be comma-separated integers, got {text!r}") from e


def _parse_float3(text: str, key: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v.strip()) for v in text.split(","))
    except ValueError as e:
        raise ConfigurationError(f"{key} must be comma-separated floats, got {text!r}") from e
    if len(parts) != 3:
        raise ConfigurationError(f"{key} needs exactly 3 values, got {len(parts)}")
    return parts


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(raw: str, target_type: type, key: str):
    if target_type is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    try:
        return target_type(raw.strip())
    except ValueError as e:
        raise ConfigurationError(f"{key}: expected {target_type.__name__}, got {raw!r}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat `key = value` lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_run_config(
    path: Path | None = None,
    overrides: dict[str, str] | None = None,
    env: dict[str, str] | None = None,
) -> RunConfig:
    """Build the effective RunConfig from file, environment, and overrides."""
    known = {f.name: f for f in fields(RunConfig)}
    values: dict[str, object] = {}

    def apply(raw_map: dict[str, str], source: str):
        for key, raw in raw_map.items():
            if key not in known:
                raise ConfigurationError(f"{source}: unknown config key {key!r}")
            target_type = type(known[key].default)
            values[key] = _coerce(raw, target_type, key)

    if path is not None:
        text = Path(path).read_text()
        apply(parse_config_text(text, str(path)), str(path))
    env_map = env if env is not None else os.environ
    env_overrides = {
        key[len(ENV_PREFIX) :].lower(): value
        for key, value in env_map.items()
        if key.startswith(ENV_PREFIX)
    }
    apply(env_overrides, "environment")
    if overrides:
        apply({k: str(v) for k, v in overrides.items()}, "command line")
    return RunConfig(**values)


def dump_run_config(cfg: RunConfig, path: Path) -> Path:
    """Archive the effective configuration as the same flat text format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
    path.write_text("\n".join(lines) + "\n")
    return path
