"""Evaluation protocol, cross-seed aggregation and Wilson intervals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import EnvConfig, EpisodeRecord, Outcome, run_episode
from .reward import RewardWeights
from .track import TrackSpec

Z95 = 1.959964
DEFAULT_EVAL_SEEDS = (101, 202, 303, 404, 505)

# (count key, count label, rate key, rate label) in summary-block order.
_COUNT_LINES = (
    ("successful", "Successful Episodes", "success_rate", "Success Rate (%)"),
    ("off_road", "Off Road Episodes", "offroad_rate", "Off Road Rate (%)"),
    ("timeout", "Timeout Episodes", "timeout_rate", "Timeout Rate (%)"),
)
_AVERAGE_LINES = (
    ("avg_speed_offroad", "Avg Speed Off Road (km/h)"),
    ("avg_speed_success", "Avg Speed Success (km/h)"),
    ("avg_steps_success", "Avg Steps Success"),
)


@dataclass(frozen=True)
class SeedStats:
    """Outcome counts and conditional averages for one evaluation seed.

    Averages are ``None`` when no episode of the matching outcome occurred.
    """

    seed: int
    episodes: int
    successful: int
    off_road: int
    timeout: int
    avg_speed_success: float | None = None
    avg_speed_offroad: float | None = None
    avg_steps_success: float | None = None
    train_seed: int | None = None

    def __post_init__(self):
        if self.successful + self.off_road + self.timeout != self.episodes:
            raise ValueError(f"outcome counts for seed {self.seed} do not sum to {self.episodes}")
        if min(self.successful, self.off_road, self.timeout) < 0:
            raise ValueError("outcome counts must be non-negative")
        for key, count in (("avg_speed_success", self.successful),
                           ("avg_speed_offroad", self.off_road),
                           ("avg_steps_success", self.successful)):
            if (getattr(self, key) is None) != (count == 0):
                raise ValueError(f"{key} must be present exactly when its outcome occurred")

    @classmethod
    def from_records(cls, seed: int, records: list[EpisodeRecord],
                     train_seed: int | None = None) -> SeedStats:
        by = {o: [r for r in records if r.outcome is o] for o in Outcome}
        succ, off = by[Outcome.SUCCESSFUL], by[Outcome.OFFROAD]
        return cls(seed, len(records), len(succ), len(off), len(by[Outcome.TIMEOUT]),
                   _mean([r.avg_speed_kmh for r in succ]),
                   _mean([r.avg_speed_kmh for r in off]),
                   _mean([float(r.step_count) for r in succ]), train_seed)

    def rate(self, key: str) -> float:
        return 100.0 * getattr(self, key) / self.episodes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SeedStats:
        return cls(**data)


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class IterationStats:
    """Cross-seed summary: mean ± sample std per metric plus pooled counts."""

    metrics: dict[str, MeanStd | None]
    pooled_n: int
    pooled_successful: int
    pooled_off_road: int
    pooled_timeout: int
    wilson: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return 100.0 * self.pooled_successful / self.pooled_n

    @property
    def offroad_rate(self) -> float:
        return 100.0 * self.pooled_off_road / self.pooled_n

    @property
    def timeout_rate(self) -> float:
        return 100.0 * self.pooled_timeout / self.pooled_n

    def metric(self, key: str) -> MeanStd | None:
        return self.metrics.get(key)

    def to_dict(self) -> dict:
        return {
            "metrics": {k: (None if v is None else asdict(v)) for k, v in self.metrics.items()},
            "pooled_n": self.pooled_n, "pooled_successful": self.pooled_successful,
            "pooled_off_road": self.pooled_off_road, "pooled_timeout": self.pooled_timeout,
            "wilson": {k: list(v) for k, v in self.wilson.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> IterationStats:
        metrics = {k: (None if v is None else MeanStd(**v)) for k, v in data["metrics"].items()}
        return cls(metrics, data["pooled_n"], data["pooled_successful"], data["pooled_off_road"],
                   data["pooled_timeout"], {k: tuple(v) for k, v in data["wilson"].items()})


def _mean(xs: list[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def episode_seed(seed: int, episode_index: int) -> int:
    """Stable sub-seed for one evaluation episode."""
    return int(np.random.SeedSequence([seed, episode_index]).generate_state(1)[0])


def evaluate_seed(policy, track: TrackSpec, weights: RewardWeights, env_cfg: EnvConfig | None,
                  n_episodes: int, seed: int, backend=None,
                  train_seed: int | None = None) -> tuple[SeedStats, list[EpisodeRecord]]:
    records = [run_episode(policy, track, weights, env_cfg, episode_seed(seed, i), backend=backend)
               for i in range(n_episodes)]
    return SeedStats.from_records(seed, records, train_seed), records


def evaluate_policy(policy, track: TrackSpec, weights: RewardWeights,
                    env_cfg: EnvConfig | None = None, n_episodes: int = 50,
                    eval_seeds=DEFAULT_EVAL_SEEDS, backend=None,
                    keep_records: bool = False, train_seed: int | None = None):
    """Run ``n_episodes`` deterministic episodes for every evaluation seed.

    Returns the per-seed stats, or ``(stats, records)`` with ``keep_records``.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    seeds = list(eval_seeds)
    if not seeds:
        raise ValueError("at least one evaluation seed is required")
    stats, records = [], []
    for s in seeds:
        st, recs = evaluate_seed(policy, track, weights, env_cfg, n_episodes, s, backend,
                                 train_seed)
        stats.append(st)
        records.extend(recs)
    return (stats, records) if keep_records else stats


def mean_std(values: list[float]) -> MeanStd | None:
    """Mean and sample standard deviation; a single value has std 0."""
    if not values:
        return None
    n = len(values)
    if min(values) == max(values):
        return MeanStd(float(values[0]), 0.0, n)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return MeanStd(mean, math.sqrt(var), n)


def aggregate(per_seed: list[SeedStats]) -> IterationStats:
    """Summarise seeds; conditional averages use only seeds where they are defined."""
    if not per_seed:
        raise ValueError("aggregate needs at least one SeedStats")
    # Sorting makes the floating-point sums independent of seed order.
    per_seed = sorted(per_seed, key=lambda s: (-1 if s.train_seed is None else s.train_seed,
                                               s.seed))
    metrics: dict[str, MeanStd | None] = {"episodes": mean_std([s.episodes for s in per_seed])}
    for count_key, _, rate_key, _ in _COUNT_LINES:
        metrics[count_key] = mean_std([getattr(s, count_key) for s in per_seed])
        metrics[rate_key] = mean_std([s.rate(count_key) for s in per_seed])
    for key, _ in _AVERAGE_LINES:
        metrics[key] = mean_std([getattr(s, key) for s in per_seed if getattr(s, key) is not None])
    n = sum(s.episodes for s in per_seed)
    succ = sum(s.successful for s in per_seed)
    off = sum(s.off_road for s in per_seed)
    to = sum(s.timeout for s in per_seed)
    wilson = {"success": wilson_interval(succ, n), "off_road": wilson_interval(off, n),
              "timeout": wilson_interval(to, n)}
    return IterationStats(metrics, n, succ, off, to, wilson)


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, as ``(lower, upper)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= successes <= n:
        raise ValueError(f"successes must lie in [0, {n}], got {successes}")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # Clamp away rounding just outside [0, 1] and keep p inside the interval.
    return max(0.0, min(centre - half, p)), min(1.0, max(centre + half, p))


def _pm(ms: MeanStd) -> str:
    return f"{ms.mean:.2f} ± {ms.std:.2f}"


def render_stats_block(per_seed: list[SeedStats], stats: IterationStats | None = None) -> str:
    """Bullet-list summary across seeds, two decimals, undefined averages omitted."""
    stats = stats or aggregate(per_seed)
    lines = [f"- Total Episodes: {stats.metrics['episodes'].mean:.2f}"]
    for count_key, count_label, rate_key, rate_label in _COUNT_LINES:
        lines.append(f"- {count_label}: {_pm(stats.metrics[count_key])}")
        lines.append(f"- {rate_label}: {_pm(stats.metrics[rate_key])}")
    for key, label in _AVERAGE_LINES:
        ms = stats.metrics.get(key)
        if ms is not None:
            lines.append(f"- {label}: {_pm(ms)}")
    return "\n".join(lines) + "\n"
