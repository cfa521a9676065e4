"""Deterministic 2D car simulation on a closed track.

Kinematic bicycle model stepped at a fixed ``dt``.  An episode ends on the
first off-road step, on completing a lap, or when the step budget runs out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .kernels import (
    ARC_S, EV_LAP, EV_OFFROAD, EV_TIMEOUT, HEADING, LAP, LAT, N_PARAMS, N_STATE, OBS_DIM,
    OFFROAD, PREV_SPEED, PROGRESS, SPEED, STEPS, X, Y,
)
from .reward import OFFROAD_AMPLIFIER, STAY_LOOKAHEAD, V_THRESH, RewardWeights, compose_columns
from .track import TrackSpec


class EnvError(RuntimeError):
    pass


class Outcome(str, enum.Enum):
    SUCCESSFUL = "Successful"
    OFFROAD = "OffRoad"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.05
    max_steps: int = 2000
    a_max: float = 8.0
    v_max: float = 40.0
    v_rev_max: float = 5.0
    wheelbase: float = 2.5
    delta_max_deg: float = 30.0
    start_offset: float = 10.0
    start_lateral_jitter: float = 0.1
    start_heading_jitter_deg: float = 3.0
    v_thresh: float = V_THRESH
    offroad_amplifier: float = OFFROAD_AMPLIFIER
    stay_lookahead: float = STAY_LOOKAHEAD

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"EnvConfig.{f.name} must be finite")
        if self.dt <= 0 or self.max_steps < 1 or self.v_max <= self.v_thresh:
            raise ValueError("EnvConfig needs dt > 0, max_steps >= 1, v_max > v_thresh")

    @classmethod
    def from_dict(cls, data: dict) -> EnvConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown EnvConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Action:
    throttle: float
    steer: float

    def clamped(self) -> Action:
        return Action(min(1.0, max(-1.0, self.throttle)), min(1.0, max(-1.0, self.steer)))


@dataclass
class CarState:
    position: tuple[float, float]
    heading: float
    speed: float
    prev_speed: float = 0.0
    arc_s: float = 0.0
    lateral_norm: float = 0.0
    progress: float = 0.0
    step_count: int = 0
    off_road_count: int = 0
    lap_done: bool = False

    def to_row(self) -> np.ndarray:
        row = np.zeros(N_STATE)
        row[X], row[Y] = self.position
        row[HEADING] = self.heading
        row[SPEED] = self.speed
        row[PREV_SPEED] = self.prev_speed
        row[ARC_S] = self.arc_s
        row[LAT] = self.lateral_norm
        row[PROGRESS] = self.progress
        row[STEPS] = self.step_count
        row[OFFROAD] = self.off_road_count
        row[LAP] = 1.0 if self.lap_done else 0.0
        return row

    @classmethod
    def from_row(cls, row) -> CarState:
        row = [float(v) for v in row]
        return cls((row[X], row[Y]), row[HEADING], row[SPEED], row[PREV_SPEED], row[ARC_S],
                   row[LAT], row[PROGRESS], int(row[STEPS]), int(row[OFFROAD]), row[LAP] > 0)


@dataclass(frozen=True)
class StepEvents:
    off_road: bool = False
    lap_done: bool = False
    timed_out: bool = False
    features: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @property
    def terminal(self) -> bool:
        return self.off_road or self.lap_done or self.timed_out


@dataclass
class EpisodeTrace:
    """Raw per-step event log of one episode, used for outcome classification."""

    events: list[StepEvents]
    max_steps: int


@dataclass
class EpisodeRecord:
    outcome: Outcome
    step_count: int
    avg_speed_kmh: float
    cumulative_reward: float
    seed: int
    feature_sums: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    telemetry: list[dict] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "step_count": self.step_count,
                "avg_speed_kmh": self.avg_speed_kmh,
                "cumulative_reward": self.cumulative_reward, "seed": self.seed,
                "feature_sums": list(self.feature_sums)}


def pack_params(track: TrackSpec, weights: RewardWeights, cfg: EnvConfig) -> np.ndarray:
    p = np.zeros(N_PARAMS)
    p[kernels.P_DT] = cfg.dt
    p[kernels.P_MAX_STEPS] = cfg.max_steps
    p[kernels.P_A_MAX] = cfg.a_max
    p[kernels.P_V_MAX] = cfg.v_max
    p[kernels.P_V_REV_MAX] = cfg.v_rev_max
    p[kernels.P_WHEELBASE] = cfg.wheelbase
    p[kernels.P_DELTA_MAX] = math.radians(cfg.delta_max_deg)
    p[kernels.P_V_THRESH] = cfg.v_thresh
    p[kernels.P_OFFROAD_AMP] = cfg.offroad_amplifier
    p[kernels.P_STAY_LOOKAHEAD] = cfg.stay_lookahead
    p[kernels.P_HALF_WIDTH] = track.half_width
    p[kernels.P_TOTAL_LENGTH] = track.total_length
    p[kernels.P_GOAL_S] = track.goal_s
    p[kernels.P_LAT_GAIN] = weights.lateral_gain
    p[kernels.P_LAT_TARGET] = weights.lateral_target
    return p


def reset(track: TrackSpec, seed: int, cfg: EnvConfig | None = None) -> CarState:
    """Start state: on the centerline ``start_offset`` metres past the goal, at rest.

    A seed-derived jitter shifts the car sideways and rotates its heading.
    """
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(seed)
    lat = float(rng.uniform(-cfg.start_lateral_jitter, cfg.start_lateral_jitter))
    dh = math.radians(float(rng.uniform(-cfg.start_heading_jitter_deg,
                                        cfg.start_heading_jitter_deg)))
    s = track.wrap(track.goal_s + cfg.start_offset)
    cx, cy = track.point_at(s)
    tx, ty = track.tangent_at(s)
    x = cx + lat * track.half_width * ty
    y = cy - lat * track.half_width * tx
    proj = track.project((x, y))
    return CarState((x, y), math.atan2(ty, tx) + dh, 0.0, 0.0, proj.arc_s, proj.lateral_norm)


def is_terminal(state: CarState, cfg: EnvConfig) -> bool:
    return state.off_road_count > 0 or state.lap_done or state.step_count >= cfg.max_steps


class VecEnv:
    """A batch of independent cars stepped together through the kernel.

    Rows never interact, so row ``b`` evolves exactly as a single-car run
    would.  Used for rollout collection; evaluation runs cars one at a time.
    """

    def __init__(self, track: TrackSpec, weights: RewardWeights, cfg: EnvConfig,
                 n: int, backend=None):
        self.track = track
        self.weights = weights
        self.cfg = cfg
        self.n = n
        self.backend = backend or kernels.impl
        self.geometry = track.geometry(self.backend)
        params = pack_params(track, weights, cfg)
        self.params = params if self.backend.NAME == "cython" else params.tolist()
        self.state = np.zeros((n, N_STATE))
        self.obs = np.zeros((n, OBS_DIM))
        self.features = np.zeros((n, 4))
        self.events = np.zeros((n, 3), dtype=np.int32)
        self._active = np.ones(n, dtype=np.uint8)

    def reset_row(self, b: int, seed: int) -> None:
        self.state[b] = reset(self.track, seed, self.cfg).to_row()
        self._observe_rows()

    def _observe_rows(self) -> None:
        wx, wy, _, cum_s, tx, ty, kappa = self.geometry
        self.backend.observe_batch(self.state, wx, wy, cum_s, tx, ty, kappa, self.params,
                                   self.obs)

    def step(self, actions: np.ndarray, active: np.ndarray | None = None):
        """Step active rows; returns ``(rewards, features, events)`` views."""
        if active is None:
            active = self._active
        actions = np.ascontiguousarray(actions, dtype=np.float64)
        self.features[:] = 0.0
        self.events[:] = 0
        wx, wy, seg_len, cum_s, tx, ty, kappa = self.geometry
        self.backend.step_batch(self.state, actions, active, wx, wy, seg_len, cum_s, tx, ty,
                                kappa, self.params, self.features, self.events, self.obs)
        rewards = compose_columns(self.weights, self.features)
        if not np.all(np.isfinite(rewards)):
            raise EnvError("non-finite reward")
        return rewards, self.features, self.events


def step(state: CarState, action: Action, track: TrackSpec, weights: RewardWeights,
         cfg: EnvConfig | None = None, backend=None):
    """Advance one car by one step.

    Returns ``(new_state, reward, events)``.
    """
    cfg = cfg or EnvConfig()
    if is_terminal(state, cfg):
        raise EnvError("step called on a terminal state")
    env = VecEnv(track, weights, cfg, 1, backend)
    env.state[0] = state.to_row()
    rewards, features, events = env.step(np.array([[action.throttle, action.steer]]))
    ev = StepEvents(bool(events[0, EV_OFFROAD]), bool(events[0, EV_LAP]),
                    bool(events[0, EV_TIMEOUT]), tuple(float(v) for v in features[0]))
    return CarState.from_row(env.state[0]), float(rewards[0]), ev


def observe(state: CarState, track: TrackSpec, cfg: EnvConfig | None = None) -> np.ndarray:
    env = VecEnv(track, RewardWeights(0.0, 0.0, 0.0, 0.0), cfg or EnvConfig(), 1)
    env.state[0] = state.to_row()
    env._observe_rows()
    return env.obs[0].copy()


def classify_outcome(trace: EpisodeTrace) -> Outcome:
    """Off-road beats timeout beats a completed lap."""
    if not trace.events or not trace.events[-1].terminal:
        raise EnvError("episode trace has not terminated")
    if any(ev.off_road for ev in trace.events):
        return Outcome.OFFROAD
    if len(trace.events) >= trace.max_steps or trace.events[-1].timed_out:
        return Outcome.TIMEOUT
    if trace.events[-1].lap_done:
        return Outcome.SUCCESSFUL
    raise EnvError("terminal step carries no recognised event")


def run_episode(policy, track: TrackSpec, weights: RewardWeights, cfg: EnvConfig | None,
                seed: int, telemetry: bool = False, backend=None) -> EpisodeRecord:
    """Roll out ``policy.act`` deterministically from the seeded start state."""
    cfg = cfg or EnvConfig()
    dim = getattr(policy, "obs_dim", OBS_DIM)
    if dim != OBS_DIM:
        raise EnvError(f"policy expects {dim} inputs, observation has {OBS_DIM}")
    env = VecEnv(track, weights, cfg, 1, backend)
    env.reset_row(0, seed)
    trace: list[StepEvents] = []
    speed_sum = 0.0
    total = 0.0
    sums = np.zeros(4)
    rows = [] if telemetry else None
    while True:
        action = np.asarray(policy.act(env.obs[0]), dtype=np.float64).reshape(1, 2)
        rewards, features, events = env.step(action)
        ev = StepEvents(bool(events[0, EV_OFFROAD]), bool(events[0, EV_LAP]),
                        bool(events[0, EV_TIMEOUT]))
        trace.append(ev)
        speed = env.state[0, SPEED]
        speed_sum += abs(speed) * 3.6
        total += rewards[0]
        sums += features[0]
        if rows is not None:
            rows.append({"step": len(trace), "x": env.state[0, X], "y": env.state[0, Y],
                         "speed_kmh": speed * 3.6, "lateral_norm": env.state[0, LAT],
                         "reward": rewards[0]})
        if ev.terminal:
            break
    steps = len(trace)
    return EpisodeRecord(classify_outcome(EpisodeTrace(trace, cfg.max_steps)), steps,
                         speed_sum / steps, float(total), seed,
                         tuple(float(v) for v in sums), rows)
