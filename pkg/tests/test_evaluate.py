from __future__ import annotations

import numpy as np
import pytest

from drivefusion.core import SEMANTIC_COLUMNS, SemanticFeatureVector, TargetPair
from drivefusion.errors import ParseError, ValidationError
from drivefusion.evaluate import (
    MetricReport,
    label_zones,
    mean_predictor_baseline,
    mse,
    per_zone_report,
    read_metrics_csv,
    read_prediction_csv,
    wrap_degrees,
    write_metrics_csv,
    write_prediction_csv,
)

_COL = {name: i for i, name in enumerate(SEMANTIC_COLUMNS)}


def make_vec(**kwargs) -> SemanticFeatureVector:
    values = [0.0] * 20
    mask = [False] * 20
    for name, v in kwargs.items():
        if v is None:
            mask[_COL[name]] = True
        else:
            values[_COL[name]] = float(v)
    return SemanticFeatureVector(tuple(values), tuple(mask))


def keyed(pairs):
    return [(("ch0", i), t) for i, t in enumerate(pairs)]


def test_mse_zero_for_identical():
    truth = keyed([TargetPair(3.0, 40.0), TargetPair(-7.0, 55.0)])
    report = mse(truth, truth)
    assert (report.mse_angle, report.mse_speed, report.combined) == (0.0, 0.0, 0.0)


def test_mse_matches_hand_loop():
    rng = np.random.default_rng(0)
    truth = keyed([TargetPair(float(rng.normal(0, 30)), float(rng.uniform(0, 90))) for _ in range(100)])
    pred = [(k, TargetPair(t.steering_angle + float(rng.normal()), t.speed + float(rng.normal())))
            for k, t in truth]
    report = mse(pred, truth)

    tmap = dict(truth)
    a = s = 0.0
    for k, p in pred:
        a += (p.steering_angle - tmap[k].steering_angle) ** 2
        s += (p.speed - tmap[k].speed) ** 2
    assert report.mse_angle == pytest.approx(a / 100, abs=1e-9)
    assert report.mse_speed == pytest.approx(s / 100, abs=1e-9)
    assert report.combined == pytest.approx(a / 100 + s / 100, abs=1e-9)


def test_mse_key_mismatch():
    truth = keyed([TargetPair(0, 0)])
    pred = [(("chX", 9), TargetPair(0, 0))]
    with pytest.raises(ValidationError):
        mse(pred, truth)


def test_mse_chunking_invariance():
    rng = np.random.default_rng(4)
    truth = keyed([TargetPair(float(rng.normal()), float(rng.normal())) for _ in range(101)])
    pred = [(k, TargetPair(t.steering_angle + 1, t.speed - 2)) for k, t in truth]
    full = mse(pred, truth)
    # mean of per-sample squared errors, accumulated in a different order
    errs = [(1.0, 4.0)] * 101
    assert full.mse_angle == pytest.approx(sum(e[0] for e in reversed(errs)) / 101, abs=1e-9)
    assert full.mse_speed == pytest.approx(sum(e[1] for e in reversed(errs)) / 101, abs=1e-9)


def test_mean_predictor_baseline():
    train = [TargetPair(0.0, 10.0), TargetPair(2.0, 30.0)]  # means: 1.0, 20.0
    truth = keyed([TargetPair(1.0, 20.0), TargetPair(3.0, 24.0)])
    report = mean_predictor_baseline(train, truth)
    assert report.mse_angle == pytest.approx((0.0 + 4.0) / 2, abs=1e-12)
    assert report.mse_speed == pytest.approx((0.0 + 16.0) / 2, abs=1e-12)


def test_zone_labels_speed_limits():
    assert "Zone50" in label_zones(make_vec(hereSpeedLimit=50))
    assert "Zone30" in label_zones(make_vec(hereSpeedLimit=30))
    assert "Zone80" in label_zones(make_vec(hereSpeedLimit=80))
    assert not {"Zone30", "Zone50", "Zone80"} & label_zones(make_vec(hereSpeedLimit=60))


def test_zone_labels_turns():
    right = label_zones(make_vec(hereCurrentHeading=10, here10mHeading=50))
    assert "Right" in right and "Left" not in right
    left = label_zones(make_vec(hereCurrentHeading=50, here10mHeading=10))
    assert "Left" in left
    straight = label_zones(make_vec(hereCurrentHeading=100, here10mHeading=108))
    assert "Straight" in straight
    # wraparound: 355 -> 15 is a +20 degree right turn, not -340
    wrapped = label_zones(make_vec(hereCurrentHeading=355, here10mHeading=15))
    assert "Right" in wrapped
    assert wrap_degrees(15 - 355) == pytest.approx(20.0)


def test_zone_labels_flags_and_missing():
    labels = label_zones(make_vec(hereSignal=1, hereYield=12.5, herePedestrian=None))
    assert "TrafficLight" in labels and "Yield" in labels and "Pedestrian" not in labels
    all_missing = SemanticFeatureVector((0.0,) * 20, (True,) * 20)
    assert label_zones(all_missing) == frozenset()


def test_zone_labels_fixture_rows():
    rows = [
        (make_vec(hereSpeedLimit=30, hereCurrentHeading=0, here10mHeading=0), {"Zone30", "Straight"}),
        (make_vec(hereSpeedLimit=50, hereSignal=1, hereCurrentHeading=0, here10mHeading=-40),
         {"Zone50", "TrafficLight", "Left"}),
        (make_vec(hereSpeedLimit=80, hereCurrentHeading=350, here10mHeading=20),
         {"Zone80", "Right"}),
        (make_vec(herePedestrian=2.0, hereYield=None, hereCurrentHeading=None, here10mHeading=None),
         {"Pedestrian"}),
        (make_vec(hereSpeedLimit=None, hereCurrentHeading=5, here10mHeading=19.9), {"Straight"}),
        (make_vec(hereSpeedLimit=50, hereCurrentHeading=5, here10mHeading=20.1), {"Zone50", "Right"}),
    ]
    for vec, expected in rows:
        assert label_zones(vec) == frozenset(expected)


def test_per_zone_single_zone_equals_overall():
    truth = keyed([TargetPair(0, 0), TargetPair(10, 5)])
    pred = [(k, TargetPair(t.steering_angle + 2, t.speed + 1)) for k, t in truth]
    labels = {k: frozenset({"Zone50"}) for k, _ in truth}
    report = per_zone_report(pred, truth, labels)
    assert set(report.zones) == {"Zone50"}
    assert report.zones["Zone50"].mse_angle == pytest.approx(report.mse_angle, abs=1e-12)
    assert report.zones["Zone50"].count == 2


def test_per_zone_weighted_mean_identity():
    rng = np.random.default_rng(11)
    truth = keyed([TargetPair(float(rng.normal()), float(rng.normal())) for _ in range(60)])
    pred = [(k, TargetPair(t.steering_angle + float(rng.normal()), t.speed)) for k, t in truth]
    labels = {k: frozenset({"Left"} if i < 23 else {"Right"}) for i, (k, _) in enumerate(truth)}
    report = per_zone_report(pred, truth, labels)
    za, zb = report.zones["Left"], report.zones["Right"]
    recombined = (za.mse_angle * za.count + zb.mse_angle * zb.count) / (za.count + zb.count)
    assert report.mse_angle == pytest.approx(recombined, abs=1e-9)
    assert "Pedestrian" not in report.zones  # empty zone omitted, not zeroed


def test_prediction_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    preds = [
        ((f"ch{int(rng.integers(0, 5))}", i), TargetPair(float(rng.normal(0, 50)), float(rng.uniform(0, 130))))
        for i in range(1000)
    ]
    path = write_prediction_csv(tmp_path / "preds.csv", preds)
    first = path.read_bytes()
    again = write_prediction_csv(tmp_path / "preds2.csv", read_prediction_csv(path))
    assert again.read_bytes() == first  # byte-identical re-serialization

    # ordering is (chapter, frameIndex)
    rows = read_prediction_csv(path)
    assert rows == sorted(rows, key=lambda kv: kv[0])


def test_prediction_csv_empty_and_errors(tmp_path):
    path = write_prediction_csv(tmp_path / "empty.csv", [])
    assert path.read_bytes() == b"chapter,frameIndex,canSteering,canSpeed\r\n"
    assert read_prediction_csv(path) == []

    bad = tmp_path / "bad.csv"
    bad.write_text("chapter,frameIndex,canSteering,canSpeed\r\nch0,notanint,1.0,2.0\r\n")
    with pytest.raises(ParseError, match=":2"):
        read_prediction_csv(bad)
    worse = tmp_path / "worse.csv"
    worse.write_text("who,knows\r\n")
    with pytest.raises(ParseError):
        read_prediction_csv(worse)


def test_metrics_csv_round_trip(tmp_path):
    truth = keyed([TargetPair(1, 2), TargetPair(3, 4), TargetPair(5, 6)])
    pred = [(k, TargetPair(t.steering_angle + 1, t.speed + 2)) for k, t in truth]
    labels = {k: frozenset({"Zone30"} if i else {"Zone30", "Yield"}) for i, (k, _) in enumerate(truth)}
    report = per_zone_report(pred, truth, labels)
    path = write_metrics_csv(tmp_path / "metrics.csv", report)
    back = read_metrics_csv(path)
    assert back.combined == pytest.approx(report.combined, abs=1e-6)
    assert set(back.zones) == set(report.zones)
    assert isinstance(back, MetricReport)
