from __future__ import annotations

from pathlib import Path

import pytest

from drivefusion import pipeline
from drivefusion.config import RunConfig
from drivefusion.model import BackboneSpec, FusionConfig


def tiny_run_config(dataset_root: Path, out: Path, **overrides) -> RunConfig:
    """A desk-scale RunConfig with a deliberately small network."""
    values = dict(
        dataset_root=str(dataset_root),
        out=str(out),
        seed=5,
        preset="tiny",
        synth_routes=3,
        synth_chapters=4,
        synth_chapter_frames=150,
        epochs=1,
        batch_size=16,
        desk_channels="8,16,16",
        fc_hidden="32,24",
        head_hidden="48,32,16",
        lstm_hidden=24,
    )
    values.update(overrides)
    return RunConfig(**values)


def tiny_fusion_config(**overrides) -> FusionConfig:
    """Small standalone model config for fast unit tests (8x6 images)."""
    values = dict(
        backbone=BackboneSpec("desk", desk_channels=(4, 8)),
        input_resolution=(8, 6),
        use_semantic=True,
        semantic_dim=20,
        fc_hidden=(16, 12),
        lstm_hidden=12,
        head_hidden=(24, 16, 8),
        head_dropout=0.10,
        init_seed=1,
    )
    values.update(overrides)
    return FusionConfig(**values)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> RunConfig:
    """One generated + preprocessed synthetic dataset shared across tests.

    Tests must treat the dataset tree and cache as read-only; anything that
    mutates files copies them first.
    """
    root = tmp_path_factory.mktemp("tiny_dataset")
    cfg = tiny_run_config(root / "data", root / "run")
    pipeline.run_gen_synth(cfg)
    pipeline.run_preprocess(cfg)
    return cfg
