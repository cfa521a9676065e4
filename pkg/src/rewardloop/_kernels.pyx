# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Mirrors ``_kernels_py`` statement for statement; keep the two in sync.  The
extension is built with ``-ffp-contract=off`` so results match the Python
fallback bit for bit.
"""

from libc.math cimport acos, atan2, cos, fabs, fmod, sin, sqrt, tan, INFINITY

NAME = "cython"

cdef enum:
    X = 0
    Y = 1
    HEADING = 2
    SPEED = 3
    PREV_SPEED = 4
    ARC_S = 5
    LAT = 6
    PROGRESS = 7
    STEPS = 8
    OFFROAD = 9
    LAP = 10

cdef enum:
    P_DT = 0
    P_MAX_STEPS = 1
    P_A_MAX = 2
    P_V_MAX = 3
    P_V_REV_MAX = 4
    P_WHEELBASE = 5
    P_DELTA_MAX = 6
    P_V_THRESH = 7
    P_OFFROAD_AMP = 8
    P_STAY_LOOKAHEAD = 9
    P_HALF_WIDTH = 10
    P_TOTAL_LENGTH = 11
    P_GOAL_S = 12
    P_LAT_GAIN = 13
    P_LAT_TARGET = 14

cdef double RAD_TO_DEG = 180.0 / 3.14159265358979323846
cdef double[4] PREVIEW_DISTANCES = [5.0, 15.0, 30.0, 60.0]
cdef double PREVIEW_SCALE = 25.0


cdef inline double _clamp1(double v) nogil:
    if v > 1.0:
        return 1.0
    elif v < -1.0:
        return -1.0
    return v


cdef struct Proj:
    double arc
    double signed
    Py_ssize_t seg
    double ux
    double uy


cdef Proj _project(double px, double py, const double[::1] wx, const double[::1] wy,
                   const double[::1] seg_len, const double[::1] cum_s,
                   const double[::1] tx, const double[::1] ty, double total_length) noexcept nogil:
    cdef Py_ssize_t n = wx.shape[0]
    cdef double best = INFINITY
    cdef Py_ssize_t best_i = 0
    cdef double best_t = 0.0
    cdef Py_ssize_t i
    cdef double dx, dy, t, ex, ey, d2, cx, cy, ux, uy, d, nx, ny, arc
    cdef Proj out
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
    if (best_t == 0.0 or best_t == seg_len[i]) and best > 0.0:
        d = sqrt(best)
        nx = ex / d
        ny = ey / d
        ux = -ny
        uy = nx
        if ux * tx[i] + uy * ty[i] < 0.0:
            ux = ny
            uy = -nx
    arc = cum_s[i] + best_t
    if arc >= total_length:
        arc -= total_length
    out.arc = arc
    out.signed = ex * uy - ey * ux
    out.seg = i
    out.ux = ux
    out.uy = uy
    return out


def project(double px, double py, const double[::1] wx, const double[::1] wy,
            const double[::1] seg_len, const double[::1] cum_s, const double[::1] tx,
            const double[::1] ty, double total_length):
    cdef Proj p = _project(px, py, wx, wy, seg_len, cum_s, tx, ty, total_length)
    return p.arc, p.signed, p.seg, p.ux, p.uy


cdef inline Py_ssize_t _locate(double s, const double[::1] cum_s) noexcept nogil:
    cdef Py_ssize_t lo = 0
    cdef Py_ssize_t hi = cum_s.shape[0]
    cdef Py_ssize_t mid
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cum_s[mid] <= s:
            lo = mid
        else:
            hi = mid
    return lo


cdef inline double _wrap(double s, double total_length) noexcept nogil:
    s = fmod(s, total_length)
    if s < 0.0:
        s += total_length
    if s >= total_length:
        s -= total_length
    return s


cdef inline double _curvature(double s, const double[::1] cum_s, const double[::1] kappa,
                              double total_length) noexcept nogil:
    cdef Py_ssize_t n = cum_s.shape[0]
    cdef Py_ssize_t i
    cdef double nxt
    s = _wrap(s, total_length)
    i = _locate(s, cum_s)
    if i + 1 < n:
        nxt = cum_s[i + 1]
    else:
        nxt = total_length
    if s - cum_s[i] <= nxt - s:
        return kappa[i]
    return kappa[(i + 1) % n]


cdef inline bint _crossed(double prev_s, double new_s, double goal_s, bint forward,
                          double total_length) noexcept nogil:
    cdef double span, to_goal
    if not forward:
        return False
    span = new_s - prev_s
    if span < 0.0:
        span += total_length
    to_goal = goal_s - prev_s
    if to_goal < 0.0:
        to_goal += total_length
    return 0.0 < to_goal and to_goal <= span


cdef inline double _speed_feature(double speed, double prev_speed, double v_thresh,
                                  double v_max, double a_max, double dt) noexcept nogil:
    cdef double level = _clamp1((speed - v_thresh) / (v_max - v_thresh))
    cdef double acc = _clamp1((speed - prev_speed) / (a_max * dt))
    return level + 0.25 * acc


cdef inline double _stay_from_angle(double theta) noexcept nogil:
    if theta < 10.0:
        return 1.0
    if theta < 30.0:
        return 0.5
    if theta < 60.0:
        return 0.0
    return -0.25


cdef inline double _angle_to(double heading, double dx, double dy) noexcept nogil:
    cdef double norm = sqrt(dx * dx + dy * dy)
    cdef double c
    if norm == 0.0:
        return 0.0
    c = _clamp1((cos(heading) * dx + sin(heading) * dy) / norm)
    return acos(c) * RAD_TO_DEG


cdef void _observe(double[:, ::1] state, Py_ssize_t b, const double[::1] cum_s,
                   const double[::1] tx, const double[::1] ty, const double[::1] kappa,
                   const double[::1] params, double[:, ::1] obs) noexcept nogil:
    cdef double total = params[P_TOTAL_LENGTH]
    cdef double arc = state[b, ARC_S]
    cdef double lat = state[b, LAT]
    cdef Py_ssize_t i = _locate(_wrap(arc, total), cum_s)
    cdef double err = state[b, HEADING] - atan2(ty[i], tx[i])
    cdef double acc = _clamp1((state[b, SPEED] - state[b, PREV_SPEED])
                              / (params[P_A_MAX] * params[P_DT]))
    cdef int k
    obs[b, 0] = state[b, SPEED] / params[P_V_MAX]
    obs[b, 1] = acc
    obs[b, 2] = lat
    obs[b, 3] = sin(err)
    obs[b, 4] = cos(err)
    for k in range(4):
        obs[b, 5 + k] = _clamp1(_curvature(arc + PREVIEW_DISTANCES[k], cum_s, kappa, total)
                                * PREVIEW_SCALE)
    obs[b, 9] = 1.0 + lat
    obs[b, 10] = 1.0 - lat


def observe_batch(double[:, ::1] state, const double[::1] wx, const double[::1] wy,
                  const double[::1] cum_s, const double[::1] tx, const double[::1] ty,
                  const double[::1] kappa, const double[::1] params, double[:, ::1] obs):
    cdef Py_ssize_t b
    with nogil:
        for b in range(state.shape[0]):
            _observe(state, b, cum_s, tx, ty, kappa, params, obs)


def step_batch(double[:, ::1] state, const double[:, ::1] actions,
               const unsigned char[::1] active, const double[::1] wx, const double[::1] wy,
               const double[::1] seg_len, const double[::1] cum_s, const double[::1] tx,
               const double[::1] ty, const double[::1] kappa, const double[::1] params,
               double[:, ::1] features, int[:, ::1] events, double[:, ::1] obs):
    cdef double dt = params[P_DT]
    cdef double max_steps = params[P_MAX_STEPS]
    cdef double a_max = params[P_A_MAX]
    cdef double v_max = params[P_V_MAX]
    cdef double v_rev = params[P_V_REV_MAX]
    cdef double wheelbase = params[P_WHEELBASE]
    cdef double delta_max = params[P_DELTA_MAX]
    cdef double hw = params[P_HALF_WIDTH]
    cdef double total = params[P_TOTAL_LENGTH]
    cdef double lat_target = params[P_LAT_TARGET]
    cdef double half = 0.5 * total
    cdef Py_ssize_t b, li
    cdef double throttle, steer, prev_speed, speed, heading, x, y, lat, delta_s
    cdef double progress, steps, s, u, lx, ly, theta
    cdef bint off, lap, timeout
    cdef Proj p
    with nogil:
        for b in range(state.shape[0]):
            if not active[b]:
                continue
            throttle = _clamp1(actions[b, 0])
            steer = _clamp1(actions[b, 1])

            prev_speed = state[b, SPEED]
            speed = prev_speed + a_max * throttle * dt
            if speed > v_max:
                speed = v_max
            elif speed < -v_rev:
                speed = -v_rev
            heading = state[b, HEADING] + (speed / wheelbase) * tan(steer * delta_max) * dt
            x = state[b, X] + speed * dt * cos(heading)
            y = state[b, Y] + speed * dt * sin(heading)

            p = _project(x, y, wx, wy, seg_len, cum_s, tx, ty, total)
            lat = p.signed / hw
            delta_s = p.arc - state[b, ARC_S]
            if delta_s > half:
                delta_s -= total
            elif delta_s < -half:
                delta_s += total
            progress = state[b, PROGRESS] + delta_s
            steps = state[b, STEPS] + 1.0

            off = fabs(lat) > 1.0
            lap = (_crossed(state[b, ARC_S], p.arc, params[P_GOAL_S], delta_s > 0.0, total)
                   and progress > half)
            timeout = steps >= max_steps

            state[b, X] = x
            state[b, Y] = y
            state[b, HEADING] = heading
            state[b, PREV_SPEED] = prev_speed
            state[b, SPEED] = speed
            state[b, ARC_S] = p.arc
            state[b, LAT] = lat
            state[b, PROGRESS] = progress
            state[b, STEPS] = steps
            if off:
                state[b, OFFROAD] = state[b, OFFROAD] + 1.0
            if lap:
                state[b, LAP] = 1.0

            s = _wrap(p.arc + params[P_STAY_LOOKAHEAD], total)
            li = _locate(s, cum_s)
            u = s - cum_s[li]
            lx = wx[li] + u * tx[li]
            ly = wy[li] + u * ty[li]
            lx = lx + lat_target * hw * ty[li]
            ly = ly - lat_target * hw * tx[li]
            theta = _angle_to(heading, lx - x, ly - y)

            features[b, 0] = _speed_feature(speed, prev_speed, params[P_V_THRESH], v_max,
                                            a_max, dt)
            features[b, 1] = params[P_OFFROAD_AMP] if off else 0.0
            features[b, 2] = params[P_LAT_GAIN] * (1.0 - fabs(lat - lat_target))
            features[b, 3] = _stay_from_angle(theta)
            events[b, 0] = 1 if off else 0
            events[b, 1] = 1 if lap else 0
            events[b, 2] = 1 if timeout else 0
            _observe(state, b, cum_s, tx, ty, kappa, params, obs)


def gae(const double[::1] rewards, const double[::1] values, const unsigned char[::1] dones,
        double bootstrap, double gamma, double lam, double[::1] out):
    cdef Py_ssize_t n = rewards.shape[0]
    cdef Py_ssize_t t
    cdef double running = 0.0
    cdef double next_value = bootstrap
    cdef double nonterminal, delta
    with nogil:
        for t in range(n - 1, -1, -1):
            if dones[t]:
                nonterminal = 0.0
            else:
                nonterminal = 1.0
            delta = rewards[t] + gamma * next_value * nonterminal - values[t]
            running = delta + gamma * lam * nonterminal * running
            out[t] = running
            next_value = values[t]
