from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from rewardloop import nn
from rewardloop.env import EnvConfig
from rewardloop.ppo import (Collector, RolloutBuffer, TrainConfig, collect_rollouts, compute_gae, normalize,
                            ppo_loss_and_grads, ppo_update, train, write_curve)
from rewardloop.reward import RewardWeights

SMALL = TrainConfig(batch_size=64, buffer_size=256, n_envs=4, hidden=(16, 16),
                    total_env_steps=256)
W = RewardWeights(1.0, -10.0, 0.0, 1.0)


def brute_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Σ_k (γλ)^k δ_{t+k}, truncated at the first terminal step."""
    n = len(rewards)
    nxt = list(values[1:]) + [bootstrap]
    deltas = [rewards[t] + gamma * nxt[t] * (0.0 if dones[t] else 1.0) - values[t]
              for t in range(n)]
    adv = []
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            total += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.buffer_size, cfg.lr, cfg.entropy_coef, cfg.clip_eps) == (
        1024, 20480, 3e-4, 5e-3, 0.2)
    assert (cfg.gae_lambda, cfg.gamma, cfg.time_horizon, cfg.epochs) == (0.95, 0.99, 64, 5)
    assert (cfg.value_coef, cfg.max_grad_norm) == (0.5, 0.5)
    with pytest.raises(ValueError):
        TrainConfig(buffer_size=1000, batch_size=64)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_gae_single_step():
    adv, ret = compute_gae([1.0], [0.0], [0], 0.0)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_gamma_zero():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(20), rng.standard_normal(20)
    adv, _ = compute_gae(r, v, np.zeros(20), 3.0, gamma=0.0, lam=0.7)
    np.testing.assert_array_equal(adv, r - v)


def test_gae_three_steps():
    adv, _ = compute_gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0, 0, 0], 0.0)
    np.testing.assert_allclose(adv, [1 + 0.9405 + 0.9405 ** 2, 1 + 0.9405, 1.0], rtol=1e-15)


def test_gae_matches_oracle_with_dones():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 60))
        r, v = rng.standard_normal(n), rng.standard_normal(n)
        d = rng.random(n) < 0.15
        boot = float(rng.standard_normal())
        adv, ret = compute_gae(r, v, d, boot)
        np.testing.assert_allclose(adv, brute_gae(r, v, d, boot, 0.99, 0.95), atol=1e-10)
        np.testing.assert_allclose(ret, adv + v, atol=1e-15)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0], [0, 0], 0.0)


def test_normalize():
    x = np.random.default_rng(2).standard_normal(1000) * 7 + 3
    y = normalize(x)
    assert abs(y.mean()) < 1e-6 and abs(y.std() - 1) < 1e-6
    assert np.all(normalize(np.full(5, 2.0)) == 0.0)


def collector(track, seed=0, cfg=SMALL):
    return Collector(track, W, EnvConfig(), cfg, np.random.default_rng(seed))


def test_rollout_length_and_determinism(track):
    params = nn.init(0, hidden=SMALL.hidden)
    a = collect_rollouts(params, collector(track))
    b = collect_rollouts(params, collector(track))
    assert len(a) == 128 * 2 == SMALL.buffer_size
    for f in ("obs", "actions", "log_probs", "rewards", "values", "dones", "advantages"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert abs(a.advantages.mean()) < 1e-6 and abs(a.advantages.std() - 1) < 1e-6


def test_done_flags_match_episode_ends(track):
    cfg = dataclasses.replace(SMALL, buffer_size=2048, batch_size=64)
    env_cfg = EnvConfig(max_steps=60)
    col = Collector(track, W, env_cfg, cfg, np.random.default_rng(3))
    buf = collect_rollouts(nn.init(0, hidden=cfg.hidden), col)
    outcomes = buf.episode_outcomes
    assert len(outcomes) > 0
    assert int(buf.dones.sum()) == outcomes.count("OffRoad") + outcomes.count("Successful")
    assert int(buf.truncated.sum()) == outcomes.count("Timeout")
    assert not np.any(buf.dones & buf.truncated)


def random_batch(params, rng, n=32):
    obs = rng.standard_normal((n, params.obs_dim))
    mean, value, _ = nn.forward(params, obs)
    actions = mean + np.exp(params["log_std"]) * rng.standard_normal(mean.shape)
    old_lp, _ = nn.gaussian_head(mean, params["log_std"], actions)
    return obs, actions, old_lp, value


def test_ratio_one_matches_unclipped():
    params = nn.init(0, hidden=(16, 16))
    rng = np.random.default_rng(4)
    obs, act, old_lp, value = random_batch(params, rng)
    adv, ret = rng.standard_normal(32), value + rng.standard_normal(32)
    _, g_clip, diag = ppo_loss_and_grads(params, obs, act, old_lp, adv, ret, SMALL)
    _, g_free, _ = ppo_loss_and_grads(params, obs, act, old_lp, adv, ret,
                                      dataclasses.replace(SMALL, clip_eps=1e9))
    assert diag["clip_fraction"] == 0.0
    for k in g_clip:
        np.testing.assert_array_equal(g_clip[k], g_free[k])


def test_zero_advantage_only_entropy_moves():
    params = nn.init(0, hidden=(16, 16))
    rng = np.random.default_rng(5)
    obs, act, old_lp, value = random_batch(params, rng)
    _, grads, _ = ppo_loss_and_grads(params, obs, act, old_lp, np.zeros(32), value, SMALL)
    for k, g in grads.items():
        if k == "log_std":
            np.testing.assert_allclose(g, -SMALL.entropy_coef)
        else:
            assert not np.any(g), k


def test_loss_gradient_matches_finite_differences():
    params = nn.init(0, hidden=(16, 16), shared=False)
    rng = np.random.default_rng(6)
    obs, act, old_lp, value = random_batch(params, rng)
    # Move away from ratio 1 so both clip branches are exercised.
    old_lp = old_lp + rng.uniform(-0.5, 0.5, old_lp.shape)
    adv, ret = rng.standard_normal(32), value + rng.standard_normal(32)
    _, grads, diag = ppo_loss_and_grads(params, obs, act, old_lp, adv, ret, SMALL)
    assert 0.0 < diag["clip_fraction"] < 1.0
    theta = params.flat()
    h = 1e-6
    for _ in range(20):
        u = {k: rng.standard_normal(v.shape) for k, v in params.arrays.items()}
        uflat = np.concatenate([u[k].ravel() for k in params.names()])
        params.set_flat(theta + h * uflat)
        up, _, _ = ppo_loss_and_grads(params, obs, act, old_lp, adv, ret, SMALL)
        params.set_flat(theta - h * uflat)
        down, _, _ = ppo_loss_and_grads(params, obs, act, old_lp, adv, ret, SMALL)
        params.set_flat(theta)
        fd = (up - down) / (2 * h)
        an = sum(float(np.sum(grads[k] * u[k])) for k in params.names())
        assert fd == pytest.approx(an, rel=1e-4, abs=1e-8)


def test_bandit_learns_positive_action():
    """One-step bandit: reward 1 when the squashed first action is positive."""
    cfg = dataclasses.replace(SMALL, batch_size=64, buffer_size=64, n_envs=1, epochs=1)
    params = nn.init(0, obs_dim=11, hidden=(16,))
    adam = nn.AdamState.for_params(params)
    rng = np.random.default_rng(7)
    obs = np.tile(rng.standard_normal(11), (64, 1))
    for _ in range(200):
        mean, value, _ = nn.forward(params, obs)
        act = mean + np.exp(params["log_std"]) * rng.standard_normal(mean.shape)
        lp, _ = nn.gaussian_head(mean, params["log_std"], act)
        reward = (np.tanh(act[:, 0]) > 0).astype(float)
        adv = normalize(reward - value)
        buf = RolloutBuffer(obs, act, lp, reward, value, np.ones(64, np.uint8),
                           np.zeros(64, np.uint8), adv, reward)
        ppo_update(params, adam, buf, cfg, rng)
    mean, _, _ = nn.forward(params, obs[0])
    assert mean[0] > 0.5


def test_update_diagnostics(track):
    params = nn.init(0, hidden=SMALL.hidden)
    buf = collect_rollouts(params, collector(track))
    diag = ppo_update(params, nn.AdamState.for_params(params), buf, SMALL,
                      np.random.default_rng(0))
    assert 0.0 <= diag["clip_fraction"] <= 1.0
    assert np.isfinite(diag["approx_kl"]) and np.isfinite(diag["loss"])
    assert params.all_finite()


def test_train_one_cycle_and_determinism(track, tmp_path):
    a, curve = train(W, track, None, SMALL, seed=1)
    b, _ = train(W, track, None, SMALL, seed=1)
    c, _ = train(W, track, None, SMALL, seed=2)
    assert len(curve) == 1 and a.env_steps == SMALL.buffer_size
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.names())
    assert not np.array_equal(a.params["W0"], c.params["W0"])
    write_curve(curve, tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "env_steps,mean_episode_reward,clip_fraction,approx_kl"
    assert len(lines) == 2


def test_budget_rounds_up_to_whole_buffers(track):
    _, curve = train(W, track, None, dataclasses.replace(SMALL, total_env_steps=300), seed=0)
    assert [p.env_steps for p in curve] == [256, 512]


def test_zero_weights_give_zero_curve(track):
    cfg = dataclasses.replace(SMALL, total_env_steps=512)
    policy, curve = train(RewardWeights(0, 0, 0, 0), track, EnvConfig(max_steps=40), cfg, 0)
    rewards = [p.mean_episode_reward for p in curve if p.mean_episode_reward is not None]
    assert rewards and all(r == 0.0 for r in rewards)
    assert policy.params.all_finite()
