"""Weight proposers: chat-completion LM, console (human expert), scripted,
random search and a hill-climbing mock.

Every proposer maps a :class:`~rewardloop.prompts.PromptContext` to a
:class:`Proposal`.  The LM and console proposers receive byte-identical prompt
text for the same context.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .prompts import ExtractionError, PromptContext, extract_weights, render
from .reward import RewardWeights, WeightFileError, parse_weight_file, serialize_weight_file

API_KEY_ENV = "REWARD_LOOP_API_KEY"
CORRECTIVE = "Output only the reward function line."
DEFAULT_BOUNDS = ((0.0, 2.0), (-100.0, 0.0), (-1.0, 1.0), (0.0, 2.0))
KINDS = ("lm", "scripted", "console", "random", "hillclimb")


class ProposerError(RuntimeError):
    """A proposer could not produce weights."""


class ProposerConfigError(ProposerError):
    pass


class ProposerAuthError(ProposerError):
    pass


class ProposerExhausted(ProposerError):
    """Every attempt failed; ``attempts`` holds one log entry per try."""

    def __init__(self, message: str, attempts: list[dict]):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class LmConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "o3"
    api_key_env: str = API_KEY_ENV
    temperature: float = 1.0
    max_retries: int = 3
    timeout: float = 120.0
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "").strip()
        if not key:
            raise ProposerConfigError(f"environment variable {self.api_key_env} is not set")
        return key


@dataclass(frozen=True)
class Proposal:
    weights: RewardWeights
    raw_reply: str
    kind: str
    prompt: str
    latency_ms: float = 0.0
    retry_count: int = 0
    attempts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights.as_tuple()),
                "weight_line": serialize_weight_file(self.weights),
                "raw_reply": self.raw_reply, "kind": self.kind,
                "retry_count": self.retry_count, "attempts": self.attempts}


def _now_ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


class LmProposer:
    """Stateless single-turn chat-completions client with bounded retries."""

    kind = "lm"

    def __init__(self, cfg: LmConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.cfg = cfg
        self.client = client
        self.sleep = sleep

    def propose(self, ctx: PromptContext) -> Proposal:
        return lm_propose(ctx, self.cfg, self.client, self.sleep)


def _chat_url(endpoint: str) -> str:
    return endpoint.rstrip("/") + "/chat/completions"


def lm_propose(ctx: PromptContext, cfg: LmConfig, client: httpx.Client | None = None,
               sleep=time.sleep) -> Proposal:
    key = cfg.api_key()
    prompt = render(ctx)
    url = _chat_url(cfg.endpoint)
    headers = {"Authorization": f"Bearer {key}"}
    attempts: list[dict] = []
    content = prompt
    own_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    t0 = time.perf_counter()
    try:
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                sleep(cfg.backoff_base * 2 ** (attempt - 1))
            body = {"model": cfg.model, "messages": [{"role": "user", "content": content}],
                    "temperature": cfg.temperature}
            try:
                resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                attempts.append({"attempt": attempt, "error": f"timeout: {exc}"})
                continue
            except httpx.TransportError as exc:
                attempts.append({"attempt": attempt, "error": f"transport: {exc}"})
                continue
            if resp.status_code in (401, 403):
                raise ProposerAuthError(f"authentication failed ({resp.status_code}) at {url}")
            if resp.status_code >= 400:
                attempts.append({"attempt": attempt, "status": resp.status_code,
                                 "error": resp.text[:500]})
                if resp.status_code in (408, 429) or resp.status_code >= 500:
                    continue
                raise ProposerExhausted(f"request rejected with status {resp.status_code}",
                                        attempts)
            try:
                reply = resp.json()["choices"][0]["message"]["content"]
                if not isinstance(reply, str):
                    raise TypeError("content is not a string")
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                attempts.append({"attempt": attempt, "status": resp.status_code,
                                 "error": f"malformed response: {exc}"})
                continue
            try:
                ext = extract_weights(reply)
            except ExtractionError as exc:
                attempts.append({"attempt": attempt, "status": resp.status_code,
                                 "error": str(exc), "reply": reply})
                content = f"{prompt}\n\n{CORRECTIVE}"
                continue
            attempts.append({"attempt": attempt, "status": resp.status_code, "reply": reply})
            return Proposal(ext.weights, reply, "lm", prompt, _now_ms(t0), attempt, attempts)
    finally:
        if own_client:
            client.close()
    raise ProposerExhausted(f"no usable reply after {cfg.max_retries + 1} attempts", attempts)


class ConsoleProposer:
    """Shows the prompt and reads one weight line per iteration.

    Works with a terminal or piped input; a bad line triggers a re-prompt.
    """

    kind = "console"

    def __init__(self, stdin=None, stdout=None):
        self.stdin = stdin
        self.stdout = stdout

    def propose(self, ctx: PromptContext) -> Proposal:
        return console_propose(ctx, self.stdin or sys.stdin, self.stdout or sys.stdout)


def console_propose(ctx: PromptContext, stdin=None, stdout=None) -> Proposal:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    prompt = render(ctx)
    stdout.write(prompt)
    stdout.write("\n")
    t0 = time.perf_counter()
    retries = 0
    attempts: list[dict] = []
    while True:
        stdout.write("reward line> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            raise ProposerError("end of input while waiting for a reward line")
        line = line.strip()
        if not line:
            continue
        try:
            w = parse_weight_file(line)
        except WeightFileError as exc:
            stdout.write(f"could not parse: {exc}\n")
            attempts.append({"attempt": retries, "error": str(exc), "reply": line})
            retries += 1
            continue
        attempts.append({"attempt": retries, "reply": line})
        return Proposal(w, line, "console", prompt, _now_ms(t0), retries, attempts)


def read_script(path: str | Path) -> list[RewardWeights]:
    """One weight line per iteration; blank lines and ``#`` comments are skipped."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(parse_weight_file(line))
        except WeightFileError as exc:
            raise ProposerConfigError(f"{path}:{n}: {exc}") from None
    if not out:
        raise ProposerConfigError(f"script {path} contains no reward lines")
    return out


class ScriptedProposer:
    """Replays a fixed sequence; iteration ``i`` gets entry ``i``."""

    kind = "scripted"

    def __init__(self, sequence):
        self.sequence = [w if isinstance(w, RewardWeights) else RewardWeights(*w)
                         for w in sequence]

    def propose(self, ctx: PromptContext) -> Proposal:
        i = ctx.iteration
        if i >= len(self.sequence):
            raise ProposerError(f"script has {len(self.sequence)} entries, iteration {i} requested")
        w = self.sequence[i]
        return Proposal(w, serialize_weight_file(w), self.kind, render(ctx))


def random_propose(rng: np.random.Generator, bounds=DEFAULT_BOUNDS) -> RewardWeights:
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    if len(bounds) != 4:
        raise ValueError("need bounds for all four components")
    for lo, hi in bounds:
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("bounds must be finite")
        if lo > hi:
            raise ValueError(f"inverted bounds [{lo}, {hi}]")
    return RewardWeights(*(lo if lo == hi else float(rng.uniform(lo, hi)) for lo, hi in bounds))


class RandomProposer:
    """Uniform search; the draw for iteration ``i`` depends only on (seed, i)."""

    kind = "random"

    def __init__(self, seed: int = 0, bounds=DEFAULT_BOUNDS):
        self.seed = seed
        self.bounds = bounds

    def propose(self, ctx: PromptContext) -> Proposal:
        w = random_propose(np.random.default_rng([self.seed, ctx.iteration]), self.bounds)
        return Proposal(w, serialize_weight_file(w), self.kind, render(ctx))


class HillClimbProposer:
    """Mock expert: push the off-road penalty down while off-road stays common."""

    kind = "hillclimb"

    def __init__(self, start=(1.0, -1.0, 0.0, 1.0), step: float = 10.0,
                 offroad_threshold: float = 20.0):
        self.start = RewardWeights(*start)
        self.step = step
        self.threshold = offroad_threshold

    def propose(self, ctx: PromptContext) -> Proposal:
        if not ctx.history:
            w = self.start
        else:
            last = ctx.history[-1]
            if last.stats is None:
                raise ProposerError("hill-climb proposer needs structured stats in the history")
            w = last.weights
            if last.stats.offroad_rate > self.threshold:
                w = RewardWeights(w.w_speed, w.w_offroad - self.step, w.w_lateral, w.w_stay)
        return Proposal(w, serialize_weight_file(w), self.kind, render(ctx))


def make_proposer(kind: str, *, lm: LmConfig | None = None, script=None, seed: int = 0,
                  stdin=None, stdout=None, client: httpx.Client | None = None):
    if kind == "lm":
        cfg = lm or LmConfig()
        cfg.api_key()  # fail before any training starts
        return LmProposer(cfg, client)
    if kind == "scripted":
        if script is None:
            raise ProposerConfigError("the scripted proposer needs a script")
        seq = read_script(script) if isinstance(script, (str, Path)) else script
        return ScriptedProposer(seq)
    if kind == "console":
        return ConsoleProposer(stdin, stdout)
    if kind == "random":
        return RandomProposer(seed)
    if kind == "hillclimb":
        return HillClimbProposer()
    raise ProposerConfigError(f"unknown proposer kind {kind!r}; choose from {', '.join(KINDS)}")


def propose(proposer, ctx: PromptContext, **options) -> Proposal:
    """Dispatch to a proposer instance, or build one from a kind name first."""
    if isinstance(proposer, str):
        proposer = make_proposer(proposer, **options)
    return proposer.propose(ctx)
