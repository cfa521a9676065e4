from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rewardloop.env import EnvConfig
from rewardloop.reward import (PLACEHOLDER_WEIGHTS, RewardWeights, WeightFileError, compose,
                               feature_lateral, feature_offroad, feature_speed, feature_stay,
                               parse_weight_file, serialize_weight_file, stay_feature_from_angle)
from rewardloop.track import build_track

from conftest import square_waypoints

PLACEHOLDER = ("reward = 0.1*speedDriveReward + -0.1*offRoadPenalty + 0.1*lateralBiasReward"
               " + 0.1*stayOnTrackReward")
RUN_A = ("reward = 1.0*speedDriveReward + -50.0*offRoadPenalty + 0.0*lateralBiasReward"
         " + 1.0*stayOnTrackReward")


def test_parse_placeholder():
    assert parse_weight_file(PLACEHOLDER) == RewardWeights(0.1, -0.1, 0.1, 0.1)
    assert serialize_weight_file(PLACEHOLDER_WEIGHTS) == PLACEHOLDER


def test_parse_run_a():
    assert parse_weight_file(RUN_A) == RewardWeights(1.0, -50.0, 0.0, 1.0)


def test_zero_serialization():
    assert serialize_weight_file(RewardWeights(0, 0, 0, 0)) == (
        "reward = 0.0*speedDriveReward + 0.0*offRoadPenalty + 0.0*lateralBiasReward"
        " + 0.0*stayOnTrackReward")


def test_any_order_and_whitespace():
    text = ("  reward=1*stayOnTrackReward+ -2.5 * offRoadPenalty +0.0*lateralBiasReward"
            " + .5*speedDriveReward  \n")
    assert parse_weight_file(text) == RewardWeights(0.5, -2.5, 0.0, 1.0)


@pytest.mark.parametrize("text,match", [
    ("reward = 1.0*speedDriveReward + -1.0*offRoadPenalty + 0.0*lateralBiasReward", "missing"),
    (RUN_A + " + 1.0*turboReward", "unknown"),
    (RUN_A.replace("lateralBiasReward", "speedDriveReward"), "duplicate"),
    (RUN_A.replace("-50.0", "-5x0"), "'\\*'|malformed|unexpected"),
    (RUN_A.replace("1.0*speed", "abc*speed"), "malformed"),
    (RUN_A.replace("1.0*speed", "1.0 speed"), "'\\*'"),
    ("speed = 1.0*speedDriveReward", "reward ="),
    (RUN_A + "\n" + RUN_A, "one reward line"),
])
def test_parse_errors(text, match):
    with pytest.raises(WeightFileError, match=match):
        parse_weight_file(text)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        RewardWeights(float("nan"), 0, 0, 0)
    with pytest.raises(ValueError):
        parse_weight_file(RUN_A.replace("-50.0", "1e999"))


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(finite, finite, finite, finite)
def test_round_trip_property(a, b, c, d):
    w = RewardWeights(a, b, c, d)
    text = serialize_weight_file(w)
    assert parse_weight_file(text) == w
    assert serialize_weight_file(parse_weight_file(text)) == text


def test_round_trip_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = RewardWeights(*(rng.standard_normal(4) * 10.0 ** rng.integers(-6, 6, 4)))
        assert parse_weight_file(serialize_weight_file(w)) == w


def test_speed_feature_examples():
    cfg = EnvConfig()
    assert feature_speed(cfg.v_thresh, cfg.v_thresh, cfg) == 0.0
    assert feature_speed(cfg.v_max, cfg.v_max, cfg) == 1.0
    # (0 - 6.7) / 33.3 = -0.2012012..., plus 0.25 * clamp(-0.4 / 0.4) = -0.25.
    assert feature_speed(0.0, 0.4, cfg) == pytest.approx(-6.7 / 33.3 - 0.25, abs=1e-12)
    for v, p in np.random.default_rng(1).uniform(-5, 40, (200, 2)):
        assert -1.25 <= feature_speed(v, p, cfg) <= 1.25


def test_offroad_feature():
    assert feature_offroad(False) == 0.0
    assert -1.0 * feature_offroad(True) == -10.0
    assert 2.0 * feature_offroad(True) == 20.0
    assert feature_offroad(True, EnvConfig(offroad_amplifier=3.0)) == 3.0


def test_lateral_feature():
    for lat in np.linspace(-1.5, 1.5, 7):
        assert feature_lateral(lat, 0.0) == 0.0
    assert feature_lateral(-0.5, -0.5) == pytest.approx(0.5)
    assert feature_lateral(0.5, -0.5) == pytest.approx(0.0)
    # Target saturates at the track edge, gain does not.
    assert feature_lateral(1.0, 2.0) == pytest.approx(2.0)


@pytest.mark.parametrize("theta,expected", [
    (0.0, 1.0), (9.99, 1.0), (10.0, 0.5), (29.9, 0.5), (30.0, 0.0), (45.0, 0.0),
    (60.0, -0.25), (90.0, -0.25), (180.0, -0.25),
])
def test_stay_buckets(theta, expected):
    assert stay_feature_from_angle(theta) == expected


def test_stay_feature_geometry():
    trk = build_track(square_waypoints(400.0, per_side=4), 6.0)
    pos = (50.0, 0.0)
    # Lookahead point on the centreline is 5 m straight ahead along +x.
    assert feature_stay(0.0, pos, trk, 0.0) == 1.0
    assert feature_stay(math.radians(45), pos, trk, 0.0) == 0.0
    assert feature_stay(math.radians(90), pos, trk, 0.0) == -0.25
    # Target -0.5 puts the point 3 m to the left (+y): atan(3/5) ≈ 31°.
    assert feature_stay(0.0, pos, trk, -0.5) == 0.0
    assert feature_stay(math.atan2(3, 5), pos, trk, -0.5) == 1.0


def test_compose_examples():
    zero = RewardWeights(0, 0, 0, 0)
    assert compose(zero, 0.7, 10.0, 0.3, 1.0) == 0.0
    w = RewardWeights(1.0, -50.0, 0.0, 1.0)
    assert compose(w, 1.0, 0.0, 0.0, 1.0) == 2.0
    assert compose(w, 1.0, 10.0, 1.2, 0.5) == pytest.approx(1.0 - 500.0 + 0.5)
