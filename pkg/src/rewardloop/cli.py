"""Command-line interface: ``run``, ``resume``, ``report`` and ``replay``.

Exit codes: 0 success, 2 usage or configuration error, 3 proposer failure,
4 training failure, 5 reproducibility violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import signal
import sys
from pathlib import Path

from .env import EnvConfig, run_episode
from .evaluation import aggregate, episode_seed, evaluate_seed, wilson_interval
from .orchestrator import (ManifestError, ProposerSettings, RunConfig, RunFailed, load_manifest,
                           load_policy, resume, run_loop, surrogate_eval)
from .ppo import TrainConfig
from .proposer import KINDS, ProposerConfigError, ProposerError, read_script
from .reward import serialize_weight_file
from .track import TrackError, load_track

EXIT_OK, EXIT_USAGE, EXIT_PROPOSER, EXIT_TRAINING, EXIT_REPRO = 0, 2, 3, 4, 5
CSV_HEADER = ["iteration", "success_rate", "wilson_lo", "wilson_hi", "offroad_rate",
              "timeout_rate", "speed_mean", "speed_std", "steps_mean", "steps_std"]
PER_SEED_HEADER = ["iteration", "train_seed", "eval_seed", "episodes", "successful", "off_road",
                   "timeout", "success_rate", "offroad_rate", "timeout_rate",
                   "avg_speed_success", "avg_speed_offroad", "avg_steps_success"]
TELEMETRY_HEADER = ["step", "x", "y", "speed_kmh", "lateral_norm", "reward"]


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rewardloop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the propose/train/evaluate loop")
    r.add_argument("--goal", help="behaviour the proposer should aim for (Problem section)")
    r.add_argument("--proposer", choices=KINDS, default="scripted")
    r.add_argument("--script", help="weight file with one reward line per iteration")
    r.add_argument("--mode", choices=("full", "surrogate"), default="full")
    r.add_argument("-T", "--iterations", type=int, default=5)
    r.add_argument("--seeds", type=_int_list, default=None,
                   help="evaluation seeds, comma separated (default 101,202,303,404,505)")
    r.add_argument("--episodes", type=int, default=50, help="evaluation episodes per seed")
    r.add_argument("--train-steps", type=int, default=None, help="env steps per training run")
    r.add_argument("--train-seeds", type=int, default=1,
                   help="train this many replicas (seeds 0..k-1) per iteration")
    r.add_argument("--track", help="JSON track file (waypoints, half_width, goal_s)")
    r.add_argument("--env-config", help="JSON file overriding environment constants")
    r.add_argument("--templates", help="directory overriding prompt templates")
    r.add_argument("--out", default="runs/latest", help="run directory")
    r.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    r.add_argument("--endpoint", default=ProposerSettings.endpoint)
    r.add_argument("--model", default=ProposerSettings.model)
    r.add_argument("--temperature", type=float, default=ProposerSettings.temperature)
    r.add_argument("--max-retries", type=int, default=ProposerSettings.max_retries)
    r.add_argument("--timeout", type=float, default=ProposerSettings.timeout)
    r.add_argument("--proposer-seed", type=int, default=0, help="seed for --proposer random")
    r.add_argument("-v", "--verbose", action="store_true", help="print training progress")

    s = sub.add_parser("resume", help="continue an interrupted or failed run")
    s.add_argument("run_dir")
    s.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("report", help="per-iteration table with Wilson intervals")
    t.add_argument("run_dir")
    t.add_argument("--format", choices=("md", "csv"), default="md")
    t.add_argument("--per-seed", help="where to write per_seed.csv (default: run directory)")

    y = sub.add_parser("replay", help="re-evaluate one (iteration, seed) and check the record")
    y.add_argument("run_dir")
    y.add_argument("--iteration", type=int, required=True)
    y.add_argument("--seed", type=int, required=True, help="evaluation seed")
    y.add_argument("--train-seed", type=int, default=None)
    y.add_argument("--telemetry", help="write per-step CSV for one episode")
    y.add_argument("--episode", type=int, default=0, help="episode index for --telemetry")
    return p


def _config_from_args(a) -> RunConfig:
    if a.iterations < 1:
        raise UsageError("-T/--iterations must be >= 1")
    if a.train_seeds < 1:
        raise UsageError("--train-seeds must be >= 1")
    script = ()
    if a.proposer == "scripted":
        if not a.script:
            raise UsageError("--proposer scripted needs --script")
        try:
            script = tuple(serialize_weight_file(w) for w in read_script(a.script))
        except ProposerConfigError as exc:
            raise UsageError(str(exc)) from None
    track = None
    if a.track:
        track = load_track(a.track).to_json()
    env = EnvConfig()
    if a.env_config:
        env = EnvConfig.from_dict(json.loads(Path(a.env_config).read_text()))
    train = TrainConfig()
    if a.train_steps is not None:
        train = TrainConfig.from_dict({**train.to_dict(), "total_env_steps": a.train_steps})
    prop = ProposerSettings(a.proposer, script, a.endpoint, a.model, a.temperature,
                            a.max_retries, a.timeout, seed=a.proposer_seed)
    kwargs = {}
    if a.seeds is not None:
        kwargs["eval_seeds"] = tuple(a.seeds)
    return RunConfig(iterations=a.iterations, episodes=a.episodes, train=train, env=env,
                     proposer=prop, out_dir=a.out, mode=a.mode,
                     train_seeds=tuple(range(a.train_seeds)), goal=a.goal, track=track,
                     templates=a.templates, **kwargs)


def _print(msg: str) -> None:
    print(msg, flush=True)


def _progress(verbose: bool):
    if not verbose:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _run_guarded(fn) -> int:
    try:
        manifest = fn()
    except RunFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run state kept in {exc.manifest.run_dir}; continue with "
              f"'rewardloop resume {exc.manifest.run_dir}'", file=sys.stderr)
        return EXIT_PROPOSER if exc.stage == "propose" else EXIT_TRAINING
    except ProposerError as exc:
        print(f"error: proposer: {exc}", file=sys.stderr)
        return EXIT_PROPOSER
    best = manifest.best
    print(f"status: {manifest.status}; best iteration: {best}")
    return EXIT_OK


def cmd_run(a) -> int:
    cfg = _config_from_args(a)
    # Built before the loop so a missing API key fails before any training.
    proposer = cfg.proposer.build()
    return _run_guarded(lambda: run_loop(cfg, proposer, log=_print, overwrite=a.overwrite,
                                         progress=_progress(a.verbose)))


def cmd_resume(a) -> int:
    return _run_guarded(lambda: resume(a.run_dir, log=_print, progress=_progress(a.verbose)))


def _fmt_rate(k: int, n: int) -> str:
    lo, hi = wilson_interval(k, n)
    p = k / n
    return f"{100 * p:.1f}% +{100 * (hi - p):.1f}/−{100 * (p - lo):.1f}"


def _fmt_ms(ms) -> str:
    return "--" if ms is None else f"{ms.mean:.1f} ± {ms.std:.1f}"


def report_rows(manifest) -> list[dict]:
    """Table values recomputed from the persisted per-seed counts."""
    rows = []
    for r in manifest.records:
        st = aggregate(r.per_seed)
        n = st.pooled_n
        lo, hi = wilson_interval(st.pooled_successful, n)
        rows.append({"iteration": r.index, "n": n, "successful": st.pooled_successful,
                     "off_road": st.pooled_off_road, "timeout": st.pooled_timeout,
                     "success_rate": 100 * st.pooled_successful / n,
                     "wilson_lo": 100 * lo, "wilson_hi": 100 * hi,
                     "offroad_rate": 100 * st.pooled_off_road / n,
                     "timeout_rate": 100 * st.pooled_timeout / n,
                     "speed": st.metric("avg_speed_success"),
                     "steps": st.metric("avg_steps_success")})
    return rows


def render_markdown(rows: list[dict]) -> str:
    def best(key, pick):
        vals = [r[key] if key not in ("speed", "steps") else (r[key].mean if r[key] else None)
                for r in rows]
        vals = [v for v in vals if v is not None]
        return pick(vals) if vals else None

    b_succ, b_off = best("success_rate", max), best("offroad_rate", min)
    b_to, b_speed, b_steps = best("timeout_rate", min), best("speed", max), best("steps", min)

    def em(text, value, target):
        return f"**{text}**" if target is not None and value == target and text != "--" else text

    out = ["| Iteration | Success | Off-road | Timeout | Speed (km/h) | Steps |",
           "|---|---|---|---|---|---|"]
    for r in rows:
        n = r["n"]
        out.append("| " + " | ".join([
            str(r["iteration"]),
            em(_fmt_rate(r["successful"], n), r["success_rate"], b_succ),
            em(_fmt_rate(r["off_road"], n), r["offroad_rate"], b_off),
            em(_fmt_rate(r["timeout"], n), r["timeout_rate"], b_to),
            em(_fmt_ms(r["speed"]), r["speed"].mean if r["speed"] else None, b_speed),
            em(_fmt_ms(r["steps"]), r["steps"].mean if r["steps"] else None, b_steps),
        ]) + " |")
    return "\n".join(out) + "\n"


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)

    def num(x):
        return "" if x is None else repr(float(x))

    for r in rows:
        sp, stp = r["speed"], r["steps"]
        w.writerow([r["iteration"], num(r["success_rate"]), num(r["wilson_lo"]),
                    num(r["wilson_hi"]), num(r["offroad_rate"]), num(r["timeout_rate"]),
                    num(sp and sp.mean), num(sp and sp.std), num(stp and stp.mean),
                    num(stp and stp.std)])
    return buf.getvalue()


def write_per_seed(manifest, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_SEED_HEADER)
        for r in manifest.records:
            for s in r.per_seed:
                w.writerow([r.index, "" if s.train_seed is None else s.train_seed, s.seed,
                            s.episodes, s.successful, s.off_road, s.timeout,
                            repr(s.rate("successful")), repr(s.rate("off_road")),
                            repr(s.rate("timeout"))]
                           + ["" if v is None else repr(v) for v in
                              (s.avg_speed_success, s.avg_speed_offroad, s.avg_steps_success)])


def cmd_report(a) -> int:
    manifest = load_manifest(a.run_dir)
    rows = report_rows(manifest)
    sys.stdout.write(render_markdown(rows) if a.format == "md" else render_csv(rows))
    per_seed = Path(a.per_seed) if a.per_seed else Path(a.run_dir) / "per_seed.csv"
    write_per_seed(manifest, per_seed)
    return EXIT_OK


def _diff(expected: dict, actual: dict) -> list[str]:
    return [f"{k}: recorded {expected.get(k)!r}, replayed {actual.get(k)!r}"
            for k in sorted(set(expected) | set(actual)) if expected.get(k) != actual.get(k)]


def cmd_replay(a) -> int:
    manifest = load_manifest(a.run_dir)
    cfg = manifest.config
    if not 0 <= a.iteration < len(manifest.records):
        raise UsageError(f"iteration {a.iteration} not recorded (have {len(manifest.records)})")
    record = manifest.records[a.iteration]
    train_seed = cfg.train_seeds[0] if a.train_seed is None else a.train_seed
    if cfg.mode == "full" and train_seed not in cfg.train_seeds:
        raise UsageError(f"training seed {train_seed} not part of this run")
    if a.seed not in cfg.eval_seeds:
        raise UsageError(f"evaluation seed {a.seed} not part of this run")
    stats_path = Path(a.run_dir) / record.directory / "stats.json"
    persisted = json.loads(stats_path.read_text())["per_seed"]
    want_ts = train_seed if cfg.mode == "full" else None
    match = [s for s in persisted if s["seed"] == a.seed and s.get("train_seed") == want_ts]
    if not match:
        print(f"error: no persisted stats for seed {a.seed} in {stats_path}", file=sys.stderr)
        return EXIT_REPRO
    if cfg.mode == "surrogate":
        replayed = surrogate_eval(record.weights, [a.seed], cfg.episodes, cfg.surrogate_jitter)[0]
        if a.telemetry:
            raise UsageError("--telemetry needs a full-mode run")
    else:
        try:
            policy = load_policy(a.run_dir, record, train_seed)
        except FileNotFoundError as exc:
            raise UsageError(str(exc))
        track = cfg.load_track()
        replayed, _ = evaluate_seed(policy, track, record.weights, cfg.env, cfg.episodes,
                                    a.seed, train_seed=train_seed)
        if a.telemetry:
            ep = run_episode(policy, track, record.weights, cfg.env,
                             episode_seed(a.seed, a.episode), telemetry=True)
            with open(a.telemetry, "w", newline="") as fh:
                w = csv.DictWriter(fh, TELEMETRY_HEADER, lineterminator="\n")
                w.writeheader()
                w.writerows(ep.telemetry)
    diffs = _diff(match[0], replayed.to_dict())
    if diffs:
        print("reproducibility violation:", file=sys.stderr)
        for d in diffs:
            print(f"  {d}", file=sys.stderr)
        return EXIT_REPRO
    print(f"iteration {a.iteration}, seed {a.seed}: stats match "
          f"({replayed.successful}/{replayed.episodes} successful)")
    return EXIT_OK


def _on_sigterm(signum, frame):
    raise KeyboardInterrupt


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    signal.signal(signal.SIGTERM, _on_sigterm)
    handlers = {"run": cmd_run, "resume": cmd_resume, "report": cmd_report, "replay": cmd_replay}
    try:
        return handlers[a.command](a)
    except (UsageError, ValueError, TrackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProposerError as exc:
        print(f"error: proposer: {exc}", file=sys.stderr)
        return EXIT_PROPOSER
    except KeyboardInterrupt:
        print("interrupted; the run directory is resumable", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
