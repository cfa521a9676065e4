"""PPO with GAE, a clipped surrogate and an entropy bonus.

Rollouts come from a :class:`~rewardloop.env.VecEnv` with stochastic,
tanh-squashed actions.  Each car's stream is cut into segments at episode
ends and every ``time_horizon`` steps; a segment that stops without a
terminal event is bootstrapped from the value of the state that follows it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels, nn
from .env import EnvConfig, VecEnv
from .kernels import EV_LAP, EV_OFFROAD, EV_TIMEOUT, OBS_DIM
from .reward import RewardWeights
from .track import TrackSpec


class TrainingError(RuntimeError):
    """Raised when an update produces a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    buffer_size: int = 20480
    lr: float = 3e-4
    entropy_coef: float = 5e-3
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    time_horizon: int = 64
    epochs: int = 5
    total_env_steps: int = 400_000
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    n_envs: int = 32
    hidden: tuple[int, ...] = (128, 128, 128, 128)
    shared_trunk: bool = False
    scale_rewards: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if f.name == "hidden":
                if not value or any(h <= 0 for h in value):
                    raise ValueError("hidden sizes must be positive")
            elif not value > 0:
                raise ValueError(f"TrainConfig.{f.name} must be positive, got {value}")
        if self.buffer_size % self.batch_size:
            raise ValueError("buffer_size must be divisible by batch_size")
        if self.buffer_size % self.n_envs:
            raise ValueError("buffer_size must be divisible by n_envs")
        if self.time_horizon > self.buffer_size:
            raise ValueError("time_horizon cannot exceed buffer_size")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)
    episode_returns: list[float] = field(default_factory=list)
    episode_outcomes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class TrainedPolicy:
    params: nn.MlpParams
    seed: int
    env_steps: int
    final_mean_episode_reward: float | None = None

    @property
    def obs_dim(self) -> int:
        return self.params.obs_dim

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action: the squashed policy mean."""
        mean, _, _ = nn.forward(self.params, obs)
        return np.tanh(mean)


@dataclass
class CurvePoint:
    env_steps: int
    mean_episode_reward: float | None
    clip_fraction: float
    approx_kl: float


class ReturnScaler:
    """Divides rewards by the running std of each car's discounted return.

    Keeps value targets near unit scale whatever the reward weights are; the
    ratio between reward components is unchanged.
    """

    def __init__(self, n: int, gamma: float):
        self.gamma = gamma
        self.ret = np.zeros(n)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def scale(self) -> float:
        var = self.m2 / self.count if self.count > 1 else 1.0
        return 1.0 / math.sqrt(var + 1e-8)

    def update(self, rewards: np.ndarray, ended: np.ndarray) -> None:
        self.ret = self.ret * self.gamma + rewards
        for g in self.ret:
            self.count += 1
            delta = g - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (g - self.mean)
        self.ret[ended] = 0.0


class Collector:
    """Keeps cars running across successive buffers."""

    def __init__(self, track: TrackSpec, weights: RewardWeights, env_cfg: EnvConfig,
                 cfg: TrainConfig, rng: np.random.Generator, backend=None):
        self.env = VecEnv(track, weights, env_cfg, cfg.n_envs, backend)
        self.cfg = cfg
        self.rng = rng
        self.episode_return = np.zeros(cfg.n_envs)
        self.scaler = ReturnScaler(cfg.n_envs, cfg.gamma) if cfg.scale_rewards else None
        for b in range(cfg.n_envs):
            self.env.reset_row(b, self._episode_seed())

    def _episode_seed(self) -> int:
        return int(self.rng.integers(0, 2**31 - 1))


def collect_rollouts(params: nn.MlpParams, collector: Collector) -> RolloutBuffer:
    """Gather ``buffer_size`` transitions with sampled actions and compute GAE."""
    cfg = collector.cfg
    env = collector.env
    rng = collector.rng
    n, steps = cfg.n_envs, cfg.buffer_size // cfg.n_envs
    obs = np.zeros((n, steps, OBS_DIM))
    actions = np.zeros((n, steps, params.act_dim))
    log_probs = np.zeros((n, steps))
    rewards = np.zeros((n, steps))
    values = np.zeros((n, steps))
    dones = np.zeros((n, steps), dtype=np.uint8)
    truncated = np.zeros((n, steps), dtype=np.uint8)
    # Value of the state following step t, used only where a segment ends.
    next_values = np.zeros((n, steps))
    active = np.ones(n, dtype=np.uint8)
    ep_returns: list[float] = []
    ep_outcomes: list[str] = []
    std = np.exp(params["log_std"])

    for t in range(steps):
        obs[:, t] = env.obs
        mean, value, _ = nn.forward(params, env.obs)
        u = mean + std * rng.standard_normal(mean.shape)
        lp, _ = nn.gaussian_head(mean, params["log_std"], u)
        actions[:, t] = u
        log_probs[:, t] = lp
        values[:, t] = value
        r, _, ev = env.step(np.tanh(u), active)
        rewards[:, t] = r
        collector.episode_return += r
        terminal = (ev[:, EV_OFFROAD] | ev[:, EV_LAP]).astype(bool)
        timeout = ev[:, EV_TIMEOUT].astype(bool) & ~terminal
        if collector.scaler is not None:
            collector.scaler.update(r, terminal | timeout)
        dones[:, t] = terminal
        truncated[:, t] = timeout
        if timeout.any():
            _, v_end, _ = nn.forward(params, env.obs[timeout])
            next_values[timeout, t] = v_end
        for b in np.flatnonzero(terminal | timeout):
            ep_returns.append(float(collector.episode_return[b]))
            ep_outcomes.append("OffRoad" if ev[b, EV_OFFROAD] else
                               "Timeout" if ev[b, EV_TIMEOUT] and not ev[b, EV_LAP]
                               else "Successful")
            collector.episode_return[b] = 0.0
            env.reset_row(b, collector._episode_seed())
    _, v_last, _ = nn.forward(params, env.obs)
    next_values[:, -1] = np.where(truncated[:, -1] | dones[:, -1], next_values[:, -1], v_last)

    # Raw rewards are kept in the buffer; the scaled copy drives value targets.
    scaled = rewards * collector.scaler.scale() if collector.scaler is not None else rewards
    advantages = np.zeros((n, steps))
    backend = kernels.impl
    for b in range(n):
        start = 0
        for t in range(steps):
            seg_end = (dones[b, t] or truncated[b, t] or t == steps - 1
                       or t - start + 1 == cfg.time_horizon)
            if not seg_end:
                continue
            if dones[b, t]:
                boot = 0.0
            elif truncated[b, t] or t == steps - 1:
                boot = next_values[b, t]
            else:
                boot = values[b, t + 1]
            out = np.zeros(t + 1 - start)
            backend.gae(np.ascontiguousarray(scaled[b, start:t + 1]),
                        np.ascontiguousarray(values[b, start:t + 1]),
                        np.ascontiguousarray(dones[b, start:t + 1]),
                        float(boot), cfg.gamma, cfg.gae_lambda, out)
            advantages[b, start:t + 1] = out
            start = t + 1

    buf = RolloutBuffer(
        obs=obs.reshape(-1, OBS_DIM), actions=actions.reshape(-1, params.act_dim),
        log_probs=log_probs.ravel(), rewards=rewards.ravel(), values=values.ravel(),
        dones=dones.ravel(), truncated=truncated.ravel(), episode_returns=ep_returns,
        episode_outcomes=ep_outcomes,
    )
    buf.returns = advantages.ravel() + buf.values
    buf.advantages = normalize(advantages.ravel())
    return buf


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float = 0.99,
                lam: float = 0.95, backend=None):
    """Return ``(advantages, returns)`` for one contiguous segment.

    ``dones[t]`` marks step ``t`` as terminal: nothing after it is
    bootstrapped into it.
    """
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    dones = np.ascontiguousarray(dones, dtype=np.uint8)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    out = np.zeros(len(rewards))
    (backend or kernels.impl).gae(rewards, values, dones, float(bootstrap_value), gamma, lam, out)
    return out, out + values


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    centred = adv - adv.mean()
    if std == 0.0:
        return centred
    return centred / std


def ppo_loss_and_grads(params: nn.MlpParams, obs, actions, old_log_probs, advantages,
                       returns, cfg: TrainConfig):
    """Scalar PPO loss and its parameter gradients on one minibatch."""
    n = len(obs)
    mean, value, cache = nn.forward(params, obs)
    log_std = params["log_std"]
    log_prob, entropy = nn.gaussian_head(mean, log_std, actions)
    ratio = np.exp(log_prob - old_log_probs)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((value - returns) ** 2)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # The unclipped branch is the active one unless the clipped term is strictly smaller,
    # which only happens outside the trust region where its gradient is zero.
    d_logp = -(advantages * (surr1 <= surr2)) * ratio / n
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - cfg.entropy_coef
    d_value = cfg.value_coef * 2.0 * (value - returns) / n
    grads = nn.backward(params, cache, d_mean, d_value, d_log_std)
    diag = {
        "loss": float(loss), "policy_loss": float(policy_loss),
        "value_loss": float(value_loss), "entropy": float(entropy),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (log_prob - old_log_probs))),
    }
    return float(loss), grads, diag


def ppo_update(params: nn.MlpParams, adam: nn.AdamState, buf: RolloutBuffer, cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Run ``epochs`` passes of shuffled minibatches over the buffer."""
    total = len(buf)
    clip_fracs, kls, losses = [], [], []
    for _ in range(cfg.epochs):
        perm = rng.permutation(total)
        for start in range(0, total, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads, diag = ppo_loss_and_grads(
                params, buf.obs[idx], buf.actions[idx], buf.log_probs[idx],
                buf.advantages[idx], buf.returns[idx], cfg)
            if not math.isfinite(loss):
                raise TrainingError("non-finite PPO loss", diag)
            norm = nn.global_norm(grads)
            if norm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / norm
                for g in grads.values():
                    g *= scale
            nn.adam_step(params, grads, adam, lr=cfg.lr)
            clip_fracs.append(diag["clip_fraction"])
            kls.append(diag["approx_kl"])
            losses.append(diag["loss"])
    return {"clip_fraction": float(np.mean(clip_fracs)), "approx_kl": float(np.mean(kls)),
            "loss": float(np.mean(losses))}


def train(weights: RewardWeights, track: TrackSpec, env_cfg: EnvConfig | None,
          cfg: TrainConfig | None, seed: int, backend=None, log=None):
    """Train a fresh policy under ``weights`` for the configured step budget.

    Returns ``(TrainedPolicy, list[CurvePoint])``.  Deterministic per seed.
    """
    env_cfg = env_cfg or EnvConfig()
    cfg = cfg or TrainConfig()
    params = nn.init(seed, OBS_DIM, cfg.hidden, shared=cfg.shared_trunk)
    adam = nn.AdamState.for_params(params)
    rng = np.random.default_rng([seed, 0x5EED])
    collector = Collector(track, weights, env_cfg, cfg, rng, backend)
    cycles = max(1, math.ceil(cfg.total_env_steps / cfg.buffer_size))
    curve: list[CurvePoint] = []
    steps = 0
    last_reward = None
    for cycle in range(cycles):
        buf = collect_rollouts(params, collector)
        steps += len(buf)
        diag = ppo_update(params, adam, buf, cfg, rng)
        mean_ret = float(np.mean(buf.episode_returns)) if buf.episode_returns else None
        if mean_ret is not None:
            last_reward = mean_ret
        curve.append(CurvePoint(steps, mean_ret, diag["clip_fraction"], diag["approx_kl"]))
        if log is not None:
            outcomes = buf.episode_outcomes
            log(f"cycle {cycle + 1}/{cycles} steps={steps} episodes={len(outcomes)} "
                f"success={outcomes.count('Successful')} offroad={outcomes.count('OffRoad')} "
                f"mean_return={mean_ret} kl={diag['approx_kl']:.4f} "
                f"std={np.exp(params['log_std']).round(3).tolist()}")
    return TrainedPolicy(params, seed, steps, last_reward), curve


def write_curve(curve: list[CurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env_steps", "mean_episode_reward", "clip_fraction", "approx_kl"])
        for p in curve:
            w.writerow([p.env_steps, "" if p.mean_episode_reward is None else
                        repr(p.mean_episode_reward), repr(p.clip_fraction), repr(p.approx_kl)])
