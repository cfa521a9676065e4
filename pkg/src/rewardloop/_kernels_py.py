"""Pure-Python implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and the same floating-point operation order, so both backends
produce bit-identical results.
"""

from __future__ import annotations

import math

from .reward import lateral_contribution, speed_feature, stay_feature_from_angle

NAME = "python"

# Column layout of the per-car state matrix shared with the compiled kernel.
X, Y, HEADING, SPEED, PREV_SPEED, ARC_S, LAT, PROGRESS, STEPS, OFFROAD, LAP = range(11)
N_STATE = 11

# Layout of the packed parameter vector.
(P_DT, P_MAX_STEPS, P_A_MAX, P_V_MAX, P_V_REV_MAX, P_WHEELBASE, P_DELTA_MAX,
 P_V_THRESH, P_OFFROAD_AMP, P_STAY_LOOKAHEAD, P_HALF_WIDTH, P_TOTAL_LENGTH,
 P_GOAL_S, P_LAT_GAIN, P_LAT_TARGET) = range(15)
N_PARAMS = 15

# Layout of the per-step event matrix.
EV_OFFROAD, EV_LAP, EV_TIMEOUT = range(3)

OBS_DIM = 11
PREVIEW_DISTANCES = (5.0, 15.0, 30.0, 60.0)
PREVIEW_SCALE = 25.0


def project(px, py, wx, wy, seg_len, cum_s, tx, ty, total_length):
    """Nearest-segment projection of one point.

    Returns ``(arc_s, signed_dist, seg, tan_x, tan_y)``; the signed distance is
    positive to the right of the travel direction.
    """
    n = len(wx)
    best = math.inf
    best_i = 0
    best_t = 0.0
    for i in range(n):
        dx = px - wx[i]
        dy = py - wy[i]
        t = dx * tx[i] + dy * ty[i]
        if t < 0.0:
            t = 0.0
        elif t > seg_len[i]:
            t = seg_len[i]
        ex = dx - t * tx[i]
        ey = dy - t * ty[i]
        d2 = ex * ex + ey * ey
        if d2 < best:
            best = d2
            best_i = i
            best_t = t
    i = best_i
    cx = wx[i] + best_t * tx[i]
    cy = wy[i] + best_t * ty[i]
    ex = px - cx
    ey = py - cy
    ux = tx[i]
    uy = ty[i]
    # Along the segment interior the offset is already perpendicular.  At a
    # clamped endpoint the tangent is rotated so the offset stays on its normal.
    if (best_t == 0.0 or best_t == seg_len[i]) and best > 0.0:
        d = math.sqrt(best)
        nx = ex / d
        ny = ey / d
        ux = -ny
        uy = nx
        if ux * tx[i] + uy * ty[i] < 0.0:
            ux = ny
            uy = -nx
    signed = ex * uy - ey * ux
    arc = cum_s[i] + best_t
    if arc >= total_length:
        arc -= total_length
    return arc, signed, i, ux, uy


def locate(s, cum_s, total_length):
    """Segment index containing arc position ``s`` (already wrapped)."""
    lo = 0
    hi = len(cum_s)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cum_s[mid] <= s:
            lo = mid
        else:
            hi = mid
    return lo


def wrap(s, total_length):
    s = math.fmod(s, total_length)
    if s < 0.0:
        s += total_length
    if s >= total_length:
        s -= total_length
    return s


def point_at(s, wx, wy, cum_s, tx, ty, total_length):
    s = wrap(s, total_length)
    i = locate(s, cum_s, total_length)
    u = s - cum_s[i]
    return wx[i] + u * tx[i], wy[i] + u * ty[i], i


def curvature(s, cum_s, kappa, total_length):
    """Curvature at the vertex nearest to arc position ``s``."""
    s = wrap(s, total_length)
    n = len(cum_s)
    i = locate(s, cum_s, total_length)
    nxt = cum_s[i + 1] if i + 1 < n else total_length
    if s - cum_s[i] <= nxt - s:
        return kappa[i]
    return kappa[(i + 1) % n]


def crossed(prev_s, new_s, goal_s, forward, total_length):
    if not forward:
        return False
    span = new_s - prev_s
    if span < 0.0:
        span += total_length
    to_goal = goal_s - prev_s
    if to_goal < 0.0:
        to_goal += total_length
    return 0.0 < to_goal <= span


def step_batch(state, actions, active, wx, wy, seg_len, cum_s, tx, ty, kappa,
               params, features, events, obs):
    """Advance every active car by one step, writing results in place.

    ``features`` receives the per-step feature columns (speed, off-road,
    lateral contribution, stay) and ``events`` the terminal flags.  Inactive
    rows are left untouched.
    """
    dt = params[P_DT]
    max_steps = params[P_MAX_STEPS]
    a_max = params[P_A_MAX]
    v_max = params[P_V_MAX]
    v_rev = params[P_V_REV_MAX]
    wheelbase = params[P_WHEELBASE]
    delta_max = params[P_DELTA_MAX]
    hw = params[P_HALF_WIDTH]
    total = params[P_TOTAL_LENGTH]
    lat_target = params[P_LAT_TARGET]
    for b in range(len(active)):
        if not active[b]:
            continue
        row = state[b].tolist()
        throttle, steer = actions[b].tolist()
        if throttle > 1.0:
            throttle = 1.0
        elif throttle < -1.0:
            throttle = -1.0
        if steer > 1.0:
            steer = 1.0
        elif steer < -1.0:
            steer = -1.0

        prev_speed = row[SPEED]
        speed = prev_speed + a_max * throttle * dt
        if speed > v_max:
            speed = v_max
        elif speed < -v_rev:
            speed = -v_rev
        heading = row[HEADING] + (speed / wheelbase) * math.tan(steer * delta_max) * dt
        x = row[X] + speed * dt * math.cos(heading)
        y = row[Y] + speed * dt * math.sin(heading)

        arc, signed, _seg, _ux, _uy = project(x, y, wx, wy, seg_len, cum_s, tx, ty, total)
        lat = signed / hw
        delta_s = arc - row[ARC_S]
        half = 0.5 * total
        if delta_s > half:
            delta_s -= total
        elif delta_s < -half:
            delta_s += total
        progress = row[PROGRESS] + delta_s
        steps = row[STEPS] + 1.0

        off = abs(lat) > 1.0
        lap = (crossed(row[ARC_S], arc, params[P_GOAL_S], delta_s > 0.0, total)
               and progress > half)
        timeout = steps >= max_steps

        row[X] = x
        row[Y] = y
        row[HEADING] = heading
        row[PREV_SPEED] = prev_speed
        row[SPEED] = speed
        row[ARC_S] = arc
        row[LAT] = lat
        row[PROGRESS] = progress
        row[STEPS] = steps
        if off:
            row[OFFROAD] = row[OFFROAD] + 1.0
        if lap:
            row[LAP] = 1.0

        # Angle to the lookahead point on the lateral target line.
        lx, ly, li = point_at(arc + params[P_STAY_LOOKAHEAD], wx, wy, cum_s, tx, ty, total)
        lx = lx + lat_target * hw * ty[li]
        ly = ly - lat_target * hw * tx[li]
        theta = _angle_to(heading, lx - x, ly - y)

        state[b] = row
        features[b] = (
            speed_feature(speed, prev_speed, params[P_V_THRESH], v_max, a_max, dt),
            params[P_OFFROAD_AMP] if off else 0.0,
            lateral_contribution(lat, params[P_LAT_GAIN], lat_target),
            stay_feature_from_angle(theta),
        )
        events[b] = (1 if off else 0, 1 if lap else 0, 1 if timeout else 0)
        obs[b] = observe_row(row, wx, wy, cum_s, tx, ty, kappa, params)


def _angle_to(heading, dx, dy):
    """Unsigned angle in degrees between a heading and a direction vector."""
    norm = math.sqrt(dx * dx + dy * dy)
    if norm == 0.0:
        return 0.0
    c = (math.cos(heading) * dx + math.sin(heading) * dy) / norm
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    return math.degrees(math.acos(c))


def observe_row(row, wx, wy, cum_s, tx, ty, kappa, params):
    """Observation vector (as a list) for one state row."""
    total = params[P_TOTAL_LENGTH]
    arc = row[ARC_S]
    lat = row[LAT]
    i = locate(wrap(arc, total), cum_s, total)
    err = row[HEADING] - math.atan2(ty[i], tx[i])
    acc = (row[SPEED] - row[PREV_SPEED]) / (params[P_A_MAX] * params[P_DT])
    if acc > 1.0:
        acc = 1.0
    elif acc < -1.0:
        acc = -1.0
    out = [row[SPEED] / params[P_V_MAX], acc, lat, math.sin(err), math.cos(err)]
    for k in range(4):
        c = curvature(arc + PREVIEW_DISTANCES[k], cum_s, kappa, total) * PREVIEW_SCALE
        if c > 1.0:
            c = 1.0
        elif c < -1.0:
            c = -1.0
        out.append(c)
    out.append(1.0 + lat)
    out.append(1.0 - lat)
    return out


def observe_batch(state, wx, wy, cum_s, tx, ty, kappa, params, obs):
    for b in range(state.shape[0]):
        obs[b] = observe_row(state[b].tolist(), wx, wy, cum_s, tx, ty, kappa, params)


def gae(rewards, values, dones, bootstrap, gamma, lam, out):
    """Backward GAE recursion into ``out``; a done flag cuts the bootstrap."""
    rewards = rewards.tolist()
    values = values.tolist()
    dones = dones.tolist()
    n = len(rewards)
    result = [0.0] * n
    running = 0.0
    next_value = bootstrap
    for t in range(n - 1, -1, -1):
        if dones[t]:
            nonterminal = 0.0
        else:
            nonterminal = 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        result[t] = running
        next_value = values[t]
    out[:] = result
