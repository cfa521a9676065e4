"""Reward components, their weighted composition, and the weight-file format.

The reward is a weighted sum of four per-step features::

    reward = w_speed*speedDriveReward + w_offroad*offRoadPenalty
             + w_lateral*lateralBiasReward + w_stay*stayOnTrackReward

``lateralBiasReward`` is the one exception to strict linearity: its
coefficient doubles as the target lane position (clamped to [-1, 1]) and as
the gain, so :func:`lateral_contribution` returns the whole weighted term.
"""

from __future__ import annotations

import math
import re
from dataclasses import astuple, dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .track import TrackSpec

COMPONENTS = ("speedDriveReward", "offRoadPenalty", "lateralBiasReward", "stayOnTrackReward")

V_THRESH = 6.7  # 22 ft/s, rounded
OFFROAD_AMPLIFIER = 10.0
STAY_LOOKAHEAD = 5.0
STAY_LEVELS = (1.0, 0.5, 0.0, -0.25)


class WeightFileError(ValueError):
    """Raised when a reward line does not follow the weight-file grammar."""


@dataclass(frozen=True)
class RewardWeights:
    w_speed: float
    w_offroad: float
    w_lateral: float
    w_stay: float

    def __post_init__(self):
        for name, value in zip(COMPONENTS, astuple(self)):
            if not math.isfinite(value):
                raise ValueError(f"weight for {name} is not finite: {value!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)

    @property
    def lateral_target(self) -> float:
        return clamp(self.w_lateral, -1.0, 1.0)

    @property
    def lateral_gain(self) -> float:
        return abs(self.w_lateral)


PLACEHOLDER_WEIGHTS = RewardWeights(0.1, -0.1, 0.1, 0.1)

_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_TERM = re.compile(rf"\s*({_NUMBER})?\s*(\*)?\s*([A-Za-z_][A-Za-z0-9_]*)?\s*")
_PLUS = re.compile(r"\s*\+")
_LINE = re.compile(r"^\s*reward\s*=(.*)$")


def clamp(x: float, lo: float, hi: float) -> float:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def parse_weight_file(text: str) -> RewardWeights:
    """Parse ``reward = <num>*<name> + ...`` into :class:`RewardWeights`.

    Terms may come in any order but each of the four components must appear
    exactly once.  Signed coefficients are written as ``+ -0.1*name``.
    """
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise WeightFileError(f"expected exactly one reward line, got {len(lines)}")
    m = _LINE.match(lines[0])
    if m is None:
        raise WeightFileError(f"line does not start with 'reward =': {lines[0]!r}")
    body = m.group(1)
    values: dict[str, float] = {}
    pos = 0
    while True:
        term = _TERM.match(body, pos)
        number, star, name = term.groups()
        shown = body[pos:term.end()].strip() or body[pos:].strip()
        if number is None:
            raise WeightFileError(f"malformed number in term {shown!r}")
        if star is None:
            raise WeightFileError(f"missing '*' between factor and name in {shown!r}")
        if name is None:
            raise WeightFileError(f"missing component name in term {shown!r}")
        if name not in COMPONENTS:
            raise WeightFileError(f"unknown reward component {name!r}")
        if name in values:
            raise WeightFileError(f"duplicate reward component {name!r}")
        values[name] = float(number)
        pos = term.end()
        if pos == len(body):
            break
        plus = _PLUS.match(body, pos)
        if plus is None:
            raise WeightFileError(f"unexpected text {body[pos:]!r}")
        pos = plus.end()
    missing = [c for c in COMPONENTS if c not in values]
    if missing:
        raise WeightFileError(f"missing reward components: {', '.join(missing)}")
    return RewardWeights(*(values[c] for c in COMPONENTS))


def format_number(x: float) -> str:
    """Shortest round-tripping decimal with at least one fractional digit."""
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite weight {x!r}")
    text = repr(float(x))
    if "e" in text or "E" in text:
        mantissa, exp = text.split("e")
        if "." not in mantissa:
            mantissa += ".0"
        return f"{mantissa}e{exp}"
    return text


def serialize_weight_file(w: RewardWeights) -> str:
    terms = [f"{format_number(v)}*{name}" for v, name in zip(w.as_tuple(), COMPONENTS)]
    return "reward = " + " + ".join(terms)


def speed_feature(speed, prev_speed, v_thresh=V_THRESH, v_max=40.0, a_max=8.0, dt=0.05):
    level = (speed - v_thresh) / (v_max - v_thresh)
    if level > 1.0:
        level = 1.0
    elif level < -1.0:
        level = -1.0
    acc = (speed - prev_speed) / (a_max * dt)
    if acc > 1.0:
        acc = 1.0
    elif acc < -1.0:
        acc = -1.0
    return level + 0.25 * acc


def feature_speed(speed: float, prev_speed: float, cfg=None) -> float:
    """Speed level above the threshold plus a quarter-weighted acceleration term."""
    if cfg is None:
        return speed_feature(speed, prev_speed)
    return speed_feature(speed, prev_speed, cfg.v_thresh, cfg.v_max, cfg.a_max, cfg.dt)


def feature_offroad(off_road_event: bool, cfg=None) -> float:
    amp = OFFROAD_AMPLIFIER if cfg is None else cfg.offroad_amplifier
    return amp if off_road_event else 0.0


def lateral_contribution(lat, gain, target):
    return gain * (1.0 - abs(lat - target))


def feature_lateral(lateral_norm: float, w_lateral: float) -> float:
    """Weighted lateral-bias term; peaks when the car sits on the target lane."""
    return lateral_contribution(lateral_norm, abs(w_lateral), clamp(w_lateral, -1.0, 1.0))


def stay_feature_from_angle(theta_deg):
    if theta_deg < 10.0:
        return 1.0
    if theta_deg < 30.0:
        return 0.5
    if theta_deg < 60.0:
        return 0.0
    return -0.25


def feature_stay(heading: float, position, track: TrackSpec, target: float,
                 lookahead: float = STAY_LOOKAHEAD) -> float:
    """Graded alignment reward toward a point ``lookahead`` metres ahead.

    The point sits on the lateral target line, ``target * half_width`` to the
    right of the centerline (negative targets are to the left).
    """
    proj = track.project(position)
    px, py = track.point_at(proj.arc_s + lookahead)
    tx, ty = track.tangent_at(proj.arc_s + lookahead)
    px += target * track.half_width * ty
    py -= target * track.half_width * tx
    dx, dy = px - position[0], py - position[1]
    norm = math.sqrt(dx * dx + dy * dy)
    if norm == 0.0:
        return 1.0
    c = clamp((math.cos(heading) * dx + math.sin(heading) * dy) / norm, -1.0, 1.0)
    return stay_feature_from_angle(math.degrees(math.acos(c)))


def compose(w: RewardWeights, f_speed: float, f_offroad: float, lateral_norm: float,
            f_stay: float) -> float:
    r = (w.w_speed * f_speed + w.w_offroad * f_offroad
         + feature_lateral(lateral_norm, w.w_lateral) + w.w_stay * f_stay)
    if not math.isfinite(r):
        raise ValueError(f"non-finite reward {r!r}")
    return r


def compose_columns(w: RewardWeights, features):
    """Per-row reward from a ``(n, 4)`` feature matrix produced by the env.

    Column 2 already holds the weighted lateral contribution.
    """
    return (w.w_speed * features[:, 0] + w.w_offroad * features[:, 1]
            + features[:, 2] + w.w_stay * features[:, 3])
