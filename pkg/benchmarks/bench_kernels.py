"""Compare the compiled and pure-Python kernel backends.

Times three hot paths on each available backend: batched environment
stepping, single-point track projection and the GAE recursion.  Results are
also checked for bit-identity across backends.

Usage::

    python benchmarks/bench_kernels.py [--cars 32] [--steps 500] [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rewardloop import kernels
from rewardloop.env import EnvConfig, VecEnv
from rewardloop.reward import RewardWeights
from rewardloop.track import default_track


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_rollout(backend, cars: int, steps: int):
    track = default_track()
    env = VecEnv(track, RewardWeights(1, -50, 0, 1), EnvConfig(), cars, backend)
    for b in range(cars):
        env.reset_row(b, b)
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, (steps, cars, 2))
    actions[:, :, 0] = np.abs(actions[:, :, 0]) * 0.3
    total = 0.0
    for t in range(steps):
        rewards, _, _ = env.step(actions[t])
        total += float(rewards.sum())
    return total, env.state.copy()


def bench_project(backend, points: int):
    track = default_track()
    wx, wy, seg_len, cum_s, tx, ty, _ = track.geometry(backend)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-100, 600, (points, 2)).tolist()
    return [backend.project(px, py, wx, wy, seg_len, cum_s, tx, ty, track.total_length)
            for px, py in pts]


def bench_gae(backend, length: int, reps: int):
    rng = np.random.default_rng(2)
    r, v = rng.standard_normal(length), rng.standard_normal(length)
    d = (rng.random(length) < 0.01).astype(np.uint8)
    out = np.zeros(length)
    for _ in range(reps):
        backend.gae(r, v, d, 0.5, 0.99, 0.95, out)
    return out.copy()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cars", type=int, default=32)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args(argv)

    names = kernels.available()
    cases = {
        f"rollout ({a.cars} cars x {a.steps} steps)":
            lambda be: bench_rollout(be, a.cars, a.steps),
        f"project ({a.points} points)": lambda be: bench_project(be, a.points),
        "gae (20480 steps x 10)": lambda be: bench_gae(be, 20480, 10),
    }
    print(f"backends: {', '.join(names)}")
    print(f"{'case':<34}" + "".join(f"{n:>12}" for n in names) + "     speedup  identical")
    for label, fn in cases.items():
        times, outs = [], []
        for name in names:
            t, out = _best(lambda: fn(kernels.load(name)), a.repeat)
            times.append(t)
            outs.append(out)
        row = f"{label:<34}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(names) == 2:
            same = _same(outs[0], outs[1])
            row += f"  {times[1] / times[0]:>9.1f}x  {'yes' if same else 'NO'}"
        print(row)
    return 0


def _same(a, b) -> bool:
    """Exact equality through nested tuples/lists of floats and arrays."""
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


if __name__ == "__main__":
    raise SystemExit(main())
