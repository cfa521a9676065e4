"""The compiled and pure-Python kernels must agree bit for bit."""

from __future__ import annotations

import numpy as np
import pytest

from rewardloop import kernels
from rewardloop.env import EnvConfig, VecEnv
from rewardloop.ppo import compute_gae
from rewardloop.reward import RewardWeights

pytestmark = pytest.mark.skipif("cython" not in kernels.available(),
                                reason="compiled kernels not built")


def test_backend_selection(monkeypatch):
    assert kernels.load("python").NAME == "python"
    assert kernels.load("cython").NAME == "cython"
    monkeypatch.setenv("REWARDLOOP_PURE_PYTHON", "1")
    assert kernels.load().NAME == "python"
    with pytest.raises(ValueError):
        kernels.load("fortran")


def test_projection_identical(track):
    py, cy = kernels.load("python"), kernels.load("cython")
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = rng.uniform(-300, 300, 2)
        a = track.project(p, backend=py)
        b = track.project(p, backend=cy)
        assert a == b


def test_rollout_identical(track):
    w = RewardWeights(1.0, -10.0, -0.4, 1.0)
    cfg = EnvConfig()
    envs = [VecEnv(track, w, cfg, 8, kernels.load(n)) for n in ("python", "cython")]
    for e in envs:
        for b in range(8):
            e.reset_row(b, b)
    rng = np.random.default_rng(1)
    for _ in range(400):
        act = rng.uniform(-1, 1, (8, 2))
        act[:, 0] = np.abs(act[:, 0])
        outs = [e.step(act) for e in envs]
        np.testing.assert_array_equal(envs[0].state, envs[1].state)
        np.testing.assert_array_equal(envs[0].obs, envs[1].obs)
        for x, y in zip(outs[0], outs[1]):
            np.testing.assert_array_equal(x, y)
        done = outs[0][2].any(axis=1)
        for b in np.flatnonzero(done):
            seed = int(rng.integers(1000))
            for e in envs:
                e.reset_row(b, seed)


def test_gae_identical():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 80))
        args = (rng.standard_normal(n), rng.standard_normal(n), rng.random(n) < 0.1,
                float(rng.standard_normal()))
        a, _ = compute_gae(*args, backend=kernels.load("python"))
        b, _ = compute_gae(*args, backend=kernels.load("cython"))
        np.testing.assert_array_equal(a, b)
