"""The propose → train → evaluate → feed-back loop, with resumable persistence.

Run directory layout::

    manifest.json              config snapshot, status, records, best iteration
    track.json                 the circuit used for every iteration
    iter_<i>/proposal.json     proposer output and retry log
             prompt.txt        exact text shown to the proposer
             reply.txt         raw reply
             weights.txt       serialized weight file
             stats.json        per-seed and aggregated statistics
             stats_block.txt   summary block fed back in later prompts
             episodes.csv      one row per evaluation episode (full mode)
             policy_seed<s>.ckpt, curve.csv   (full mode)

An iteration is staged in ``iter_<i>.tmp`` and renamed into place before the
manifest is atomically replaced, so an interrupted run is always resumable.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import nn
from .env import EnvConfig
from .evaluation import (DEFAULT_EVAL_SEEDS, IterationStats, SeedStats, aggregate, evaluate_policy,
                         render_stats_block)
from .kernels import OBS_DIM
from .ppo import TrainConfig, TrainedPolicy, TrainingError, train, write_curve
from .prompts import HistoryEntry, PromptContext, Templates, default_goal
from .proposer import LmConfig, Proposal, ProposerError, make_proposer
from .reward import RewardWeights, parse_weight_file, serialize_weight_file
from .track import TrackSpec, build_track, load_track

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
TRACK_FILE = "track.json"
MODES = ("full", "surrogate")
SURROGATE_LAP_M = 1600.0


def code_version() -> str:
    try:
        return metadata.version("rewardloop")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class ManifestError(RuntimeError):
    def __init__(self, message: str, path: str | Path | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class RunFailed(RuntimeError):
    """The loop stopped at ``stage`` (``propose`` or ``train``) of ``iteration``."""

    def __init__(self, stage: str, iteration: int, cause: BaseException, manifest: RunManifest):
        super().__init__(f"iteration {iteration} failed during {stage}: {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause
        self.manifest = manifest


@dataclass(frozen=True)
class ProposerSettings:
    kind: str = "scripted"
    script: tuple[str, ...] = ()
    endpoint: str = LmConfig.endpoint
    model: str = LmConfig.model
    temperature: float = LmConfig.temperature
    max_retries: int = LmConfig.max_retries
    timeout: float = LmConfig.timeout
    backoff_base: float = LmConfig.backoff_base
    seed: int = 0

    def lm_config(self) -> LmConfig:
        return LmConfig(self.endpoint, self.model, temperature=self.temperature,
                        max_retries=self.max_retries, timeout=self.timeout,
                        backoff_base=self.backoff_base)

    def build(self, stdin=None, stdout=None, client=None):
        script = None
        if self.kind == "scripted":
            script = [parse_weight_file(line) for line in self.script]
        return make_proposer(self.kind, lm=self.lm_config(), script=script, seed=self.seed,
                             stdin=stdin, stdout=stdout, client=client)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["script"] = list(self.script)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ProposerSettings:
        data = dict(data)
        data["script"] = tuple(data.get("script", ()))
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 5
    eval_seeds: tuple[int, ...] = DEFAULT_EVAL_SEEDS
    episodes: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    proposer: ProposerSettings = field(default_factory=ProposerSettings)
    out_dir: str = "runs/latest"
    mode: str = "full"
    train_seeds: tuple[int, ...] = (0,)
    goal: str | None = None
    track: dict | None = None
    templates: str | None = None
    surrogate_jitter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        object.__setattr__(self, "train_seeds", tuple(int(s) for s in self.train_seeds))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.eval_seeds:
            raise ValueError("at least one evaluation seed is required")
        if len(set(self.eval_seeds)) != len(self.eval_seeds):
            raise ValueError("evaluation seeds must be distinct")
        if not self.train_seeds or len(set(self.train_seeds)) != len(self.train_seeds):
            raise ValueError("training seeds must be non-empty and distinct")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def load_track(self) -> TrackSpec:
        if self.track is None:
            return load_track(None)
        return build_track(self.track["waypoints"], self.track["half_width"],
                           self.track.get("goal_s", 0.0))

    def to_dict(self) -> dict:
        """Snapshot for the manifest; ``out_dir`` is left out since the manifest sits in it."""
        return {
            "iterations": self.iterations, "eval_seeds": list(self.eval_seeds),
            "episodes": self.episodes, "train": self.train.to_dict(), "env": self.env.to_dict(),
            "proposer": self.proposer.to_dict(), "mode": self.mode,
            "train_seeds": list(self.train_seeds), "goal": self.goal, "track": self.track,
            "templates": self.templates, "surrogate_jitter": self.surrogate_jitter,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        data = dict(data)
        data["train"] = TrainConfig.from_dict(data["train"])
        data["env"] = EnvConfig.from_dict(data["env"])
        data["proposer"] = ProposerSettings.from_dict(data["proposer"])
        return cls(**data)


@dataclass
class IterationRecord:
    index: int
    proposal: dict
    weights: RewardWeights
    per_seed: list[SeedStats]
    stats: IterationStats
    stats_block: str
    checkpoints: list[str] = field(default_factory=list)
    attempt: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def directory(self) -> str:
        return iter_dir_name(self.index)

    def to_dict(self) -> dict:
        return {
            "index": self.index, "attempt": self.attempt, "directory": self.directory,
            "weights": list(self.weights.as_tuple()),
            "weight_line": serialize_weight_file(self.weights),
            "proposal": {k: v for k, v in self.proposal.items() if k != "raw_reply"},
            "checkpoints": list(self.checkpoints),
            "per_seed": [s.to_dict() for s in self.per_seed],
            "stats": self.stats.to_dict(), "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, data: dict, run_dir: Path) -> IterationRecord:
        block_path = run_dir / data["directory"] / "stats_block.txt"
        return cls(data["index"], data["proposal"], RewardWeights(*data["weights"]),
                   [SeedStats.from_dict(s) for s in data["per_seed"]],
                   IterationStats.from_dict(data["stats"]), block_path.read_text(),
                   list(data.get("checkpoints", [])), data.get("attempt", 0),
                   data.get("timings", {}))

    def history_entry(self) -> HistoryEntry:
        return HistoryEntry(self.index, self.weights, self.stats_block, stats=self.stats)


@dataclass
class RunManifest:
    run_dir: Path
    config: RunConfig
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "in-progress"
    template_version: str = ""
    code_version: str = field(default_factory=code_version)
    failure: dict | None = None
    best: int | None = None
    timestamps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "status": self.status,
            "template_version": self.template_version, "code_version": self.code_version,
            "config": self.config.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "best": self.best, "failure": self.failure, "timestamps": self.timestamps,
        }

    def save(self) -> None:
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.timestamps.setdefault("created", now)
        self.timestamps["updated"] = now
        atomic_write_text(self.run_dir / MANIFEST,
                          json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def iter_dir_name(index: int) -> str:
    return f"iter_{index}"


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_manifest(run_dir: str | Path) -> RunManifest:
    """Read and validate ``manifest.json``; structural problems raise :class:`ManifestError`."""
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        raise ManifestError("manifest not found", path)
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"unreadable manifest ({exc})", path) from None
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported schema_version {data.get('schema_version')!r}", path)
    try:
        config = RunConfig.from_dict({**data["config"], "out_dir": str(run_dir)})
        raw_records = data["records"]
        indices = [r["index"] for r in raw_records]
        if indices != list(range(len(indices))):
            raise ManifestError(f"iteration records are not contiguous from 0: {indices}", path)
        records = []
        for r in raw_records:
            rdir = run_dir / r["directory"]
            if not rdir.is_dir():
                raise ManifestError(f"record {r['index']} points at missing {rdir.name}/", path)
            records.append(IterationRecord.from_dict(r, run_dir))
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ManifestError(f"malformed manifest ({type(exc).__name__}: {exc})", path) from None
    status = data.get("status")
    if status not in ("in-progress", "complete", "failed"):
        raise ManifestError(f"unknown status {status!r}", path)
    if len(records) > config.iterations:
        raise ManifestError("more records than configured iterations", path)
    if status == "complete" and len(records) != config.iterations:
        raise ManifestError("status is complete but records are missing", path)
    return RunManifest(run_dir, config, records, status, data.get("template_version", ""),
                       data.get("code_version", ""), data.get("failure"), data.get("best"),
                       data.get("timestamps", {}))


# --- surrogate ------------------------------------------------------------------------------

def surrogate_success(w: RewardWeights) -> float:
    s = (0.05 + 0.5 * math.tanh(abs(w.w_offroad) / 20.0) + 0.3 * math.tanh(max(w.w_stay, 0.0))
         - 0.2 * abs(w.w_lateral) - 0.1 * max(-w.w_speed, 0.0))
    return min(max(s, 0.0), 1.0)


def surrogate_speed(w: RewardWeights) -> float:
    return 110.0 + 30.0 * math.tanh(max(w.w_speed, 0.0)) - 10.0 * math.tanh(abs(w.w_offroad) / 50.0)


def surrogate_rates(w: RewardWeights, jitter: float = 0.0) -> tuple[float, float, float]:
    """``(success, off_road, timeout)`` fractions summing to one."""
    s = min(max(surrogate_success(w) + jitter, 0.0), 1.0)
    off = 0.9 * (1.0 - s)
    return s, off, max(0.0, 1.0 - s - off)


def surrogate_eval(weights: RewardWeights, seeds, episodes: int,
                   jitter: bool = True) -> list[SeedStats]:
    """Closed-form stand-in for training plus evaluation.

    Each seed perturbs the success rate by N(0, 2 percentage points); the
    perturbation depends only on the seed.
    """
    out = []
    speed = surrogate_speed(weights)
    steps = SURROGATE_LAP_M / (speed / 3.6) / 0.05
    for seed in seeds:
        eps = float(np.random.default_rng([int(seed), 0x5A77]).normal(0.0, 0.02)) if jitter else 0.0
        s, off, _ = surrogate_rates(weights, eps)
        n_s = int(round(s * episodes))
        n_off = min(int(round(off * episodes)), episodes - n_s)
        n_to = episodes - n_s - n_off
        out.append(SeedStats(int(seed), episodes, n_s, n_off, n_to,
                             speed if n_s else None,
                             0.8 * speed if n_off else None,
                             steps if n_s else None))
    return out


# --- per-iteration work ----------------------------------------------------------------------

@dataclass
class StepResult:
    per_seed: list[SeedStats]
    checkpoints: list[str] = field(default_factory=list)


class SurrogateStep:
    def __call__(self, cfg: RunConfig, weights: RewardWeights, stage: Path, log) -> StepResult:
        return StepResult(surrogate_eval(weights, cfg.eval_seeds, cfg.episodes,
                                         cfg.surrogate_jitter))


class FullStep:
    """Train one policy per training seed, then evaluate each on every eval seed."""

    def __init__(self, backend=None):
        self.backend = backend

    def __call__(self, cfg: RunConfig, weights: RewardWeights, stage: Path, log) -> StepResult:
        track = cfg.load_track()
        per_seed: list[SeedStats] = []
        ckpts = []
        rows = []
        for ts in cfg.train_seeds:
            policy, curve = train(weights, track, cfg.env, cfg.train, ts, self.backend, log)
            name = f"policy_seed{ts}.ckpt"
            nn.save_checkpoint(policy.params, stage / name,
                               {"train_seed": ts, "env_steps": policy.env_steps,
                                "weights": list(weights.as_tuple())})
            ckpts.append(name)
            curve_name = "curve.csv" if len(cfg.train_seeds) == 1 else f"curve_seed{ts}.csv"
            write_curve(curve, stage / curve_name)
            stats, records = evaluate_policy(policy, track, weights, cfg.env, cfg.episodes,
                                             cfg.eval_seeds, self.backend, keep_records=True,
                                             train_seed=ts)
            per_seed.extend(stats)
            for i, r in enumerate(records):
                rows.append([ts, cfg.eval_seeds[i // cfg.episodes], i % cfg.episodes, r.seed,
                             r.outcome.value, r.step_count, repr(r.avg_speed_kmh),
                             repr(r.cumulative_reward)])
        with open(stage / "episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train_seed", "eval_seed", "episode", "episode_seed", "outcome",
                        "step_count", "avg_speed_kmh", "cumulative_reward"])
            w.writerows(rows)
        return StepResult(per_seed, ckpts)


def load_policy(run_dir: str | Path, record: IterationRecord, train_seed: int) -> TrainedPolicy:
    path = Path(run_dir) / record.directory / f"policy_seed{train_seed}.ckpt"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    params, meta = nn.load_checkpoint(path)
    return TrainedPolicy(params, train_seed, meta.get("env_steps", 0))


# --- loop ------------------------------------------------------------------------------------

def best_iteration(records: list[IterationRecord]) -> int | None:
    """Highest pooled success; ties go to fewer average steps, then the earlier index."""
    if not records:
        return None

    def key(r: IterationRecord):
        steps = r.stats.metric("avg_steps_success")
        return (-r.stats.pooled_successful / r.stats.pooled_n,
                math.inf if steps is None else steps.mean, r.index)

    return min(records, key=key).index


def _link_best(run_dir: Path, index: int | None) -> None:
    link = run_dir / "best"
    if link.is_symlink() or link.exists():
        link.unlink()
    if index is not None:
        try:
            link.symlink_to(iter_dir_name(index), target_is_directory=True)
        except OSError:
            pass


def _context(cfg: RunConfig, templates: Templates, records: list[IterationRecord]) -> PromptContext:
    return PromptContext(cfg.goal if cfg.goal is not None else default_goal(), None,
                         tuple(r.history_entry() for r in records),
                         len(cfg.eval_seeds) * len(cfg.train_seeds), templates)


def _write_stage(stage: Path, proposal: Proposal, weights: RewardWeights, per_seed, stats,
                 block: str) -> None:
    (stage / "prompt.txt").write_text(proposal.prompt, encoding="utf-8")
    (stage / "reply.txt").write_text(proposal.raw_reply, encoding="utf-8")
    (stage / "weights.txt").write_text(serialize_weight_file(weights) + "\n", encoding="utf-8")
    (stage / "proposal.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, **proposal.to_dict()}, indent=2, sort_keys=True) + "\n")
    (stage / "stats.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, "per_seed": [s.to_dict() for s in per_seed],
         "aggregate": stats.to_dict()}, indent=2, sort_keys=True) + "\n")
    (stage / "stats_block.txt").write_text(block, encoding="utf-8")


def _clean_uncommitted(run_dir: Path, n_committed: int) -> None:
    """Drop staging directories and iteration folders the manifest never recorded."""
    for p in run_dir.glob("iter_*"):
        name = p.name
        if name.endswith(".tmp"):
            shutil.rmtree(p)
            continue
        try:
            idx = int(name.split("_", 1)[1])
        except ValueError:
            continue
        if idx >= n_committed:
            shutil.rmtree(p)


def _run(manifest: RunManifest, proposer, step, log, progress) -> RunManifest:
    cfg = manifest.config
    run_dir = manifest.run_dir
    templates = Templates.load(cfg.templates)
    manifest.template_version = templates.version
    manifest.status = "in-progress"
    manifest.failure = None
    manifest.save()
    for i in range(len(manifest.records), cfg.iterations):
        ctx = _context(cfg, templates, manifest.records)
        assert ctx.iteration == i and len(ctx.history) == i
        t0 = time.perf_counter()
        try:
            proposal = proposer.propose(ctx)
        except ProposerError as exc:
            manifest.status = "failed"
            manifest.failure = {"iteration": i, "stage": "propose", "error": str(exc),
                                "attempts": getattr(exc, "attempts", [])}
            manifest.save()
            raise RunFailed("propose", i, exc, manifest) from exc
        t1 = time.perf_counter()
        stage = run_dir / (iter_dir_name(i) + ".tmp")
        if stage.exists():
            shutil.rmtree(stage)
        stage.mkdir()
        try:
            result = step(cfg, proposal.weights, stage, progress)
        except (TrainingError, FloatingPointError) as exc:
            shutil.rmtree(stage, ignore_errors=True)
            manifest.status = "failed"
            manifest.failure = {"iteration": i, "stage": "train", "error": str(exc)}
            manifest.save()
            raise RunFailed("train", i, exc, manifest) from exc
        t2 = time.perf_counter()
        stats = aggregate(result.per_seed)
        block = render_stats_block(result.per_seed, stats)
        _write_stage(stage, proposal, proposal.weights, result.per_seed, stats, block)
        final = run_dir / iter_dir_name(i)
        if final.exists():
            shutil.rmtree(final)
        os.replace(stage, final)
        record = IterationRecord(i, proposal.to_dict(), proposal.weights, result.per_seed, stats,
                                 block, result.checkpoints,
                                 timings={"propose_s": t1 - t0, "train_eval_s": t2 - t1,
                                          "latency_ms": proposal.latency_ms})
        manifest.records.append(record)
        manifest.best = best_iteration(manifest.records)
        manifest.save()
        if log is not None:
            log(summary_line(record))
    manifest.status = "complete"
    manifest.save()
    _link_best(run_dir, manifest.best)
    return manifest


def summary_line(r: IterationRecord) -> str:
    st = r.stats
    speed = st.metric("avg_speed_success")
    steps = st.metric("avg_steps_success")
    return (f"iter {r.index}: {serialize_weight_file(r.weights)} | success {st.success_rate:.1f}% "
            f"off-road {st.offroad_rate:.1f}% timeout {st.timeout_rate:.1f}% | speed "
            f"{'--' if speed is None else f'{speed.mean:.1f}'} km/h | steps "
            f"{'--' if steps is None else f'{steps.mean:.0f}'}")


def _step_for(cfg: RunConfig, step):
    if step is not None:
        return step
    return SurrogateStep() if cfg.mode == "surrogate" else FullStep()


def run_loop(cfg: RunConfig, proposer=None, step=None, log=None, overwrite: bool = False,
             progress=None) -> RunManifest:
    """Run a fresh loop into ``cfg.out_dir``.

    ``proposer`` defaults to one built from ``cfg.proposer``; ``step`` (the
    train-and-evaluate stage) defaults to the one matching ``cfg.mode``.
    ``log`` receives one summary line per iteration, ``progress`` the
    per-buffer training lines.
    """
    run_dir = Path(cfg.out_dir)
    if (run_dir / MANIFEST).exists() and not overwrite:
        raise ManifestError("a run already exists here; use resume or choose another directory",
                            run_dir / MANIFEST)
    run_dir.mkdir(parents=True, exist_ok=True)
    _clean_uncommitted(run_dir, 0)
    track = cfg.load_track()
    if cfg.track is None:
        cfg = replace(cfg, track=track.to_json())
    (run_dir / TRACK_FILE).write_text(json.dumps(track.to_json(), indent=2) + "\n")
    proposer = proposer or cfg.proposer.build()
    manifest = RunManifest(run_dir, cfg)
    return _run(manifest, proposer, _step_for(cfg, step), log, progress)


def resume(run_dir: str | Path, proposer=None, step=None, log=None, progress=None
           ) -> RunManifest:
    """Continue at the first missing iteration; a complete run is returned as is."""
    manifest = load_manifest(run_dir)
    if manifest.status == "complete":
        return manifest
    _clean_uncommitted(manifest.run_dir, len(manifest.records))
    proposer = proposer or manifest.config.proposer.build()
    return _run(manifest, proposer, _step_for(manifest.config, step), log, progress)


def untrained_policy(seed: int = 0, train_cfg: TrainConfig | None = None) -> TrainedPolicy:
    """Freshly initialised network, the baseline a trained policy is compared against."""
    cfg = train_cfg or TrainConfig()
    return TrainedPolicy(nn.init(seed, OBS_DIM, cfg.hidden, shared=cfg.shared_trunk), seed, 0)
