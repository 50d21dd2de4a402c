from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from conftest import tiny_fusion_config
from drivefusion.core import NormalizationStats, SampleKey, TargetPair
from drivefusion.dataset import LoadedSamples
from drivefusion.errors import ConfigurationError, NumericError, ParseError, ValidationError
from drivefusion.model import ModelOutput, build_fusion_model, load_checkpoint, save_checkpoint
from drivefusion.train import (
    EpochLog,
    TrainConfig,
    batch_slices,
    joint_loss,
    joint_loss_components,
    make_optimizer,
    predict,
    read_loss_log,
    train,
    write_loss_log,
)

STATS = NormalizationStats((0.5,) * 3, (0.25,) * 3, -2.0, 14.0, 45.0, 18.0)


def fake_samples(cfg, n: int, seed: int = 0) -> LoadedSamples:
    """In-memory learnable samples: targets are linear in two semantic columns."""
    rng = np.random.default_rng(seed)
    w, h = cfg.input_resolution
    sem = rng.normal(0, 1, (n, cfg.semantic_dim or 20)).astype(np.float32)
    angle = STATS.angle_mean + STATS.angle_std * sem[:, 0]
    speed = STATS.speed_mean + STATS.speed_std * 0.8 * sem[:, 1]
    return LoadedSamples(
        keys=[SampleKey("r00", "c0", i + 4) for i in range(n)],
        images_prev=rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8),
        images_curr=rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8),
        sem_prev=sem,
        sem_curr=sem,
        targets=np.column_stack([angle, speed]).astype(np.float64),
    )


def test_joint_loss_trivial():
    pred = ModelOutput(torch.tensor([1.0, -2.0]), torch.tensor([0.5, 0.0]))
    target = torch.tensor([[1.0, 0.5], [-2.0, 0.0]])
    assert float(joint_loss(pred, target)) == 0.0

    pred = ModelOutput(torch.tensor([1.0]), torch.tensor([0.0]))
    target = torch.tensor([[0.0, 0.0]])
    assert float(joint_loss(pred, target)) == 1.0


def test_joint_loss_matches_hand_computation():
    rng = np.random.default_rng(0)
    pa, ps = rng.normal(size=3), rng.normal(size=3)
    ta, ts = rng.normal(size=3), rng.normal(size=3)
    pred = ModelOutput(torch.tensor(pa), torch.tensor(ps))
    total, angle_term, speed_term = joint_loss_components(
        pred, torch.tensor(np.column_stack([ta, ts]))
    )
    hand_angle = sum((pa[i] - ta[i]) ** 2 for i in range(3)) / 3
    hand_speed = sum((ps[i] - ts[i]) ** 2 for i in range(3)) / 3
    assert float(angle_term) == pytest.approx(hand_angle, abs=1e-12)
    assert float(speed_term) == pytest.approx(hand_speed, abs=1e-12)
    assert float(total) == pytest.approx(hand_angle + hand_speed, abs=1e-12)


def test_joint_loss_rejects_non_finite():
    pred = ModelOutput(torch.tensor([float("inf")]), torch.tensor([0.0]))
    with pytest.raises(NumericError):
        joint_loss(pred, torch.tensor([[0.0, 0.0]]))
    pred = ModelOutput(torch.tensor([0.0]), torch.tensor([0.0]))
    with pytest.raises(NumericError):
        joint_loss(pred, torch.tensor([[float("nan"), 0.0]]))


def test_adam_step_matches_closed_form():
    """Two Adam steps on a scalar quadratic vs the textbook update, in float64."""
    lr, b1, b2, eps = 1e-4, 0.9, 0.999, 1e-8
    a, b = 0.8, -0.4
    x = torch.nn.Parameter(torch.tensor([1.7], dtype=torch.float64))
    opt = torch.optim.Adam([x], lr=lr, betas=(b1, b2), eps=eps)

    x_ref, m, v = 1.7, 0.0, 0.0
    for t in (1, 2):
        opt.zero_grad()
        loss = a * (x - b) ** 2
        loss.sum().backward()
        opt.step()

        g = 2 * a * (x_ref - b)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x_ref = x_ref - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(float(x.data) - x_ref) < 1e-10


def test_train_config_paper_pins():
    TrainConfig(paper_faithful=True, batch_size=8)
    with pytest.raises(ConfigurationError):
        TrainConfig(paper_faithful=True, learning_rate=1e-3)
    with pytest.raises(ConfigurationError):
        TrainConfig(paper_faithful=True, batch_size=7)
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)


def test_batch_slices_singleton_policy():
    assert batch_slices(9, 4) == [slice(0, 4), slice(4, 8)]  # trailing 1 dropped
    assert batch_slices(10, 4) == [slice(0, 4), slice(4, 8), slice(8, 10)]  # short batch kept
    assert batch_slices(1, 4) == [slice(0, 1)]  # singleton stream is never dropped


def test_zero_learning_rate_keeps_parameters(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    samples = fake_samples(cfg, 1)
    train(model, samples, STATS, TrainConfig(learning_rate=0.0, epochs=1, batch_size=8, seed=0), tmp_path)
    for name, p in model.state_dict().items():
        assert torch.equal(before[name], p), name


def test_train_determinism_same_seed(tmp_path):
    tcfg = TrainConfig(epochs=2, batch_size=8, seed=123)
    outputs = []
    for run in ("a", "b"):
        cfg = tiny_fusion_config()
        model = build_fusion_model(cfg)
        samples = fake_samples(cfg, 40)
        train(model, samples, STATS, tcfg, tmp_path / run, clock=lambda: 0.0)
        outputs.append((tmp_path / run / "loss_log.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_training_descends_on_learnable_data(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    samples = fake_samples(cfg, 300, seed=3)
    results = train(
        model, samples, STATS, TrainConfig(learning_rate=1e-3, epochs=3, batch_size=32, seed=1), tmp_path
    )
    logs = [log for _, log in results]
    assert logs[-1].total_loss < logs[0].total_loss
    assert len(results) == 3
    for k, (path, _) in enumerate(results, start=1):
        assert path.name == f"model_epoch{k}.ckpt"
        assert path.is_file()


def test_epoch_log_decomposition(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    samples = fake_samples(cfg, 50)
    results = train(model, samples, STATS, TrainConfig(epochs=2, batch_size=16, seed=0), tmp_path)
    for _, log in results:
        assert abs(log.total_loss - (log.angle_mse + log.speed_mse)) < 1e-9


def test_overfit_small_subset():
    """Capacity check: 200 Adam steps memorize 16 samples to loss < 1e-2.

    Uses the default production widths (the tiny test config lacks capacity);
    the learning rate is free here, only steps and threshold are pinned.
    """
    from drivefusion.model import FusionConfig
    from drivefusion.train import _image_batch, normalized_targets

    cfg = FusionConfig(init_seed=0, input_resolution=(64, 36))
    torch.manual_seed(0)
    model = build_fusion_model(cfg)
    samples = fake_samples(cfg, 16, seed=5)
    optimizer = make_optimizer(model, TrainConfig(learning_rate=1e-3, epochs=1, batch_size=16, seed=0))
    img_prev = _image_batch(samples.images_prev, STATS)
    img_curr = _image_batch(samples.images_curr, STATS)
    sem = torch.from_numpy(samples.sem_curr)
    target = torch.from_numpy(normalized_targets(samples, STATS).astype(np.float32))
    model.train()
    for _ in range(200):
        optimizer.zero_grad()
        pred, _ = model(img_prev, img_curr, sem, sem)
        joint_loss(pred, target).backward()
        optimizer.step()
    model.eval()
    with torch.no_grad():
        pred, _ = model(img_prev, img_curr, sem, sem)
        final = float(joint_loss(pred, target))
    assert final < 1e-2


def test_divergence_aborts_keeping_checkpoints(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    samples = fake_samples(cfg, 40)
    with pytest.raises(NumericError):
        train(model, samples, STATS, TrainConfig(learning_rate=1e8, epochs=5, batch_size=8, seed=0), tmp_path)
    # at most the completed epochs' checkpoints exist; nothing newer was written
    assert not (tmp_path / "model_epoch5.ckpt").exists()


def test_predict_constant_model(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    path = save_checkpoint(tmp_path / "zero.ckpt", model, STATS, epoch=1)
    samples = fake_samples(cfg, 10)
    preds = predict(path, samples)
    assert [k for k, _ in preds] == samples.keys  # stream order preserved
    for _, t in preds:
        assert t.steering_angle == pytest.approx(STATS.angle_mean, abs=1e-6)
        assert t.speed == pytest.approx(STATS.speed_mean, abs=1e-6)


def test_predict_round_trips(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    samples = fake_samples(cfg, 24, seed=2)
    train(model, samples, STATS, TrainConfig(epochs=1, batch_size=8, seed=0), tmp_path)
    ckpt_path = tmp_path / "model_epoch1.ckpt"

    first = predict(ckpt_path, samples)
    second = predict(ckpt_path, samples)
    assert first == second  # same checkpoint, same stream -> identical

    # predict-before-save equals predict-after-save/load exactly
    loaded = load_checkpoint(ckpt_path)
    direct = predict(loaded, samples)
    assert direct == first

    resaved = save_checkpoint(tmp_path / "resave.ckpt", loaded.model, loaded.stats, loaded.epoch)
    assert predict(resaved, samples) == first


def test_predict_validates_stream_against_checkpoint(tmp_path):
    cfg = tiny_fusion_config()
    model = build_fusion_model(cfg)
    path = save_checkpoint(tmp_path / "m.ckpt", model, STATS, epoch=1)
    wrong_sem = fake_samples(tiny_fusion_config(semantic_dim=47), 4)
    with pytest.raises(ValidationError, match="semantic"):
        predict(path, wrong_sem)
    wrong_res = fake_samples(tiny_fusion_config(input_resolution=(10, 10)), 4)
    with pytest.raises(ValidationError, match="resolution"):
        predict(path, wrong_res)


def test_loss_log_round_trip(tmp_path):
    logs = [
        EpochLog(1, 2.5, 1.5, 1.0, 12.25),
        EpochLog(2, 1.25, 0.75, 0.5, 11.0),
    ]
    path = write_loss_log(tmp_path / "loss_log.csv", logs)
    back = read_loss_log(path)
    assert [log.epoch for log in back] == [1, 2]
    assert back[0].total_loss == pytest.approx(2.5)
    assert back[1].seconds == pytest.approx(11.0)

    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,total_loss\n1,2\n")
    with pytest.raises(ParseError):
        read_loss_log(bad)
