"""Closed-circuit track geometry.

The centerline is a closed polyline.  Positions are described by their arc
length along the centerline and a signed lateral offset normalised by the
half width, negative to the left of the travel direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

MIN_WAYPOINTS = 8


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class TrackProjection:
    arc_s: float
    lateral_norm: float
    tangent: tuple[float, float]
    segment_index: int


@dataclass(frozen=True, eq=False)
class TrackSpec:
    """Immutable closed track.

    Self-intersection is not checked; callers must supply a simple polygon.
    """

    waypoints: tuple[tuple[float, float], ...]
    half_width: float
    goal_s: float
    total_length: float = field(init=False)
    cum_s: np.ndarray = field(init=False, repr=False)
    seg_len: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    kappa: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise TrackError("waypoints must be a list of (x, y) pairs")
        n = len(pts)
        if n < MIN_WAYPOINTS:
            raise TrackError(f"need at least {MIN_WAYPOINTS} waypoints, got {n}")
        if not np.all(np.isfinite(pts)):
            raise TrackError("waypoints must be finite")
        if not (self.half_width > 0 and math.isfinite(self.half_width)):
            raise TrackError(f"half_width must be positive, got {self.half_width}")
        diffs = np.roll(pts, -1, axis=0) - pts
        seg_len = np.sqrt(diffs[:, 0] ** 2 + diffs[:, 1] ** 2)
        if np.any(seg_len == 0.0):
            i = int(np.argmin(seg_len))
            raise TrackError(f"zero-length segment between waypoints {i} and {(i + 1) % n}")
        tangents = diffs / seg_len[:, None]
        cum_s = np.concatenate(([0.0], np.cumsum(seg_len)[:-1]))
        total = float(cum_s[-1] + seg_len[-1])
        if not (0.0 <= self.goal_s < total):
            raise TrackError(f"goal_s must lie in [0, {total}), got {self.goal_s}")

        prev = np.roll(tangents, 1, axis=0)
        turn = np.arctan2(prev[:, 0] * tangents[:, 1] - prev[:, 1] * tangents[:, 0],
                          prev[:, 0] * tangents[:, 0] + prev[:, 1] * tangents[:, 1])
        kappa = turn / (0.5 * (np.roll(seg_len, 1) + seg_len))

        set_ = object.__setattr__
        set_(self, "waypoints", tuple((float(x), float(y)) for x, y in pts))
        set_(self, "half_width", float(self.half_width))
        set_(self, "goal_s", float(self.goal_s))
        set_(self, "total_length", total)
        set_(self, "cum_s", cum_s)
        set_(self, "seg_len", seg_len)
        set_(self, "tangents", np.ascontiguousarray(tangents))
        set_(self, "kappa", kappa)
        points = np.ascontiguousarray(pts)
        arrays = (np.ascontiguousarray(points[:, 0]), np.ascontiguousarray(points[:, 1]),
                  seg_len, cum_s, np.ascontiguousarray(tangents[:, 0]),
                  np.ascontiguousarray(tangents[:, 1]), kappa)
        for a in arrays:
            a.setflags(write=False)
        set_(self, "_arrays", arrays)
        set_(self, "_lists", tuple(a.tolist() for a in arrays))

    def geometry(self, backend=None):
        """Geometry tuple ``(wx, wy, seg_len, cum_s, tx, ty, kappa)`` for a kernel backend."""
        backend = backend or kernels.impl
        return self._arrays if backend.NAME == "cython" else self._lists

    @property
    def n_waypoints(self) -> int:
        return len(self.waypoints)

    def wrap(self, s: float) -> float:
        return kernels._kernels_py.wrap(s, self.total_length)

    def project(self, p, backend=None) -> TrackProjection:
        backend = backend or kernels.impl
        wx, wy, seg_len, cum_s, tx, ty, _ = self.geometry(backend)
        arc, signed, seg, ux, uy = backend.project(float(p[0]), float(p[1]), wx, wy, seg_len,
                                                   cum_s, tx, ty, self.total_length)
        return TrackProjection(arc, signed / self.half_width, (ux, uy), seg)

    def segment_at(self, s: float) -> int:
        return kernels._kernels_py.locate(self.wrap(s), self._lists[3], self.total_length)

    def point_at(self, s: float) -> tuple[float, float]:
        wx, wy, _, cum_s, tx, ty, _ = self._lists
        x, y, _ = kernels._kernels_py.point_at(s, wx, wy, cum_s, tx, ty, self.total_length)
        return x, y

    def tangent_at(self, s: float) -> tuple[float, float]:
        i = self.segment_at(s)
        return self._lists[4][i], self._lists[5][i]

    def curvature_at(self, s: float) -> float:
        return kernels._kernels_py.curvature(s, self._lists[3], self._lists[6], self.total_length)

    def reconstruct(self, proj: TrackProjection) -> tuple[float, float]:
        """Inverse of :meth:`project` for points near the centerline."""
        x, y = self.point_at(proj.arc_s)
        ux, uy = proj.tangent
        off = proj.lateral_norm * self.half_width
        return x + off * uy, y - off * ux

    def to_json(self) -> dict:
        return {"waypoints": [list(p) for p in self.waypoints],
                "half_width": self.half_width, "goal_s": self.goal_s}


def build_track(waypoints, half_width: float, goal_s: float = 0.0) -> TrackSpec:
    return TrackSpec(tuple(tuple(p) for p in waypoints), half_width, goal_s)


def project_point(track: TrackSpec, p) -> TrackProjection:
    return track.project(p)


def crossed_goal(track: TrackSpec, prev_s: float, new_s: float, direction_forward: bool) -> bool:
    """True when moving forward from ``prev_s`` to ``new_s`` passes the goal line.

    The forward arc wraps at ``total_length``; the goal counts when it lies in
    the half-open arc ``(prev_s, new_s]``.
    """
    return kernels._kernels_py.crossed(prev_s, new_s, track.goal_s, direction_forward,
                                       track.total_length)


def curvature_at(track: TrackSpec, arc_s: float) -> float:
    return track.curvature_at(arc_s)


def rounded_rectangle(straight_x: float = 350.0, straight_y: float = 200.0,
                      radius: float = 80.0, corner_points: int = 5,
                      side_points: int = 3) -> list[tuple[float, float]]:
    """Counter-clockwise rounded rectangle starting mid-way along the bottom straight.

    With the defaults this yields 32 waypoints and a circumference near 1600 m.
    """
    hx, hy = straight_x / 2, straight_y / 2
    corners = [(hx, -hy, -90.0), (hx, hy, 0.0), (-hx, hy, 90.0), (-hx, -hy, 180.0)]

    def arc(cx, cy, start):
        return [(cx + radius * math.cos(math.radians(start + 90.0 * k / (corner_points - 1))),
                 cy + radius * math.sin(math.radians(start + 90.0 * k / (corner_points - 1))))
                for k in range(corner_points)]

    def side(a, b):
        return [(a[0] + (b[0] - a[0]) * k / (side_points + 1),
                 a[1] + (b[1] - a[1]) * k / (side_points + 1)) for k in range(1, side_points + 1)]

    arcs = [arc(*c) for c in corners]
    bottom = side(arcs[3][-1], arcs[0][0])
    mid = len(bottom) // 2
    pts = bottom[mid:] + arcs[0]
    pts += side(arcs[0][-1], arcs[1][0]) + arcs[1]
    pts += side(arcs[1][-1], arcs[2][0]) + arcs[2]
    pts += side(arcs[2][-1], arcs[3][0]) + arcs[3]
    pts += bottom[:mid]
    return pts


def default_track() -> TrackSpec:
    return build_track(rounded_rectangle(), half_width=6.0, goal_s=0.0)


def load_track(path: str | Path | None) -> TrackSpec:
    """Load a JSON track fixture; ``None`` returns the built-in circuit."""
    if path is None:
        return default_track()
    data = json.loads(Path(path).read_text())
    try:
        return build_track(data["waypoints"], float(data["half_width"]),
                           float(data.get("goal_s", 0.0)))
    except KeyError as exc:
        raise TrackError(f"track file {path} is missing field {exc}") from None
