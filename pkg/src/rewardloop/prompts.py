"""Prompt rendering from text templates, and weight extraction from replies.

Templates live in ``templates/`` as plain text with ``{{slot}}`` markers.  A
directory passed to :meth:`Templates.load` overrides any subset of the
built-in files; the version tag hashes the effective contents so a run
manifest records exactly which wording the proposer saw.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .reward import (PLACEHOLDER_WEIGHTS, RewardWeights, WeightFileError, parse_weight_file,
                     serialize_weight_file)

TEMPLATE_NAMES = ("initial.txt", "feedback.txt", "iteration.txt", "environment.txt", "goal.txt")
_SLOT = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_CANDIDATE = re.compile(r"^[\s>*\-`]*(reward\s*=.*?)[\s`]*$")


class PromptError(ValueError):
    pass


class ExtractionError(ValueError):
    """No usable weight line in a reply; ``reply`` keeps the raw text for retries."""

    def __init__(self, message: str, reply: str, line: str | None = None):
        super().__init__(message)
        self.reply = reply
        self.line = line


@dataclass(frozen=True)
class Templates:
    texts: dict[str, str]
    version: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> Templates:
        pkg = resources.files("rewardloop") / "templates"
        base_version = (pkg / "VERSION").read_text(encoding="utf-8").strip()
        texts = {name: (pkg / name).read_text(encoding="utf-8") for name in TEMPLATE_NAMES}
        if directory is not None:
            d = Path(directory)
            if not d.is_dir():
                raise PromptError(f"template directory {d} does not exist")
            for name in TEMPLATE_NAMES:
                if (d / name).is_file():
                    texts[name] = (d / name).read_text(encoding="utf-8")
        digest = hashlib.sha256()
        for name in TEMPLATE_NAMES:
            digest.update(name.encode() + b"\0" + texts[name].encode() + b"\0")
        return cls(texts, f"{base_version}+{digest.hexdigest()[:12]}")

    def __getitem__(self, name: str) -> str:
        return self.texts[name]


_DEFAULT_TEMPLATES: Templates | None = None


def default_templates() -> Templates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = Templates.load()
    return _DEFAULT_TEMPLATES


def default_goal() -> str:
    return default_templates()["goal.txt"].strip()


def fill(template: str, slots: dict[str, str]) -> str:
    """Substitute every ``{{name}}``; unknown names and leftover markers are errors."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in slots:
            raise PromptError(f"template slot {{{{{name}}}}} has no value")
        return slots[name]

    out = _SLOT.sub(sub, template)
    if "{{" in out:
        raise PromptError("rendered prompt still contains '{{'")
    return out


@dataclass(frozen=True)
class HistoryEntry:
    """One completed iteration: its weights, rendered stats and, optionally, the
    structured :class:`~rewardloop.evaluation.IterationStats` behind them."""

    index: int
    weights: RewardWeights
    stats_block: str
    label: str | None = None
    stats: object | None = None


@dataclass(frozen=True)
class PromptContext:
    """Everything a proposer sees.  ``history`` holds completed iterations in order."""

    user_goal: str = field(default_factory=default_goal)
    environment: str | None = None
    history: tuple[HistoryEntry, ...] = ()
    n_seeds: int = 5
    templates: Templates = field(default_factory=default_templates)

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        idx = [h.index for h in self.history]
        if any(b < a for a, b in zip(idx, idx[1:])):
            raise PromptError("history must be ordered by iteration index")
        if any(i < 0 for i in idx):
            raise PromptError("iteration indices must be non-negative")

    @property
    def iteration(self) -> int:
        """Index of the iteration this context asks a proposal for."""
        return self.history[-1].index + 1 if self.history else 0

    @property
    def template_version(self) -> str:
        return self.templates.version

    def with_entry(self, entry: HistoryEntry) -> PromptContext:
        return PromptContext(self.user_goal, self.environment, self.history + (entry,),
                             self.n_seeds, self.templates)


def render_initial(ctx: PromptContext) -> str:
    if ctx.history:
        raise PromptError("the initial prompt takes an empty history")
    env = ctx.environment if ctx.environment is not None else ctx.templates["environment.txt"]
    return fill(ctx.templates["initial.txt"], {
        "environment": env.strip(),
        "goal": ctx.user_goal.strip(),
        "placeholder": serialize_weight_file(PLACEHOLDER_WEIGHTS),
    })


def render_feedback(ctx: PromptContext) -> str:
    if not ctx.history:
        raise PromptError("the feedback prompt needs at least one completed iteration")
    sections = []
    for h in ctx.history:
        sections.append(fill(ctx.templates["iteration.txt"], {
            # Headings count from 1 while stored indices count from 0.
            "number": str(h.index + 1),
            "label": f" ({h.label})" if h.label else "",
            "reward_line": serialize_weight_file(h.weights),
            "n_seeds": str(ctx.n_seeds),
            "stats_block": h.stats_block.rstrip("\n"),
        }))
    return fill(ctx.templates["feedback.txt"], {
        "n_seeds": str(ctx.n_seeds),
        "history": "\n".join(s.rstrip("\n") + "\n" for s in sections),
    })


def render(ctx: PromptContext) -> str:
    """Initial prompt for an empty history, feedback prompt otherwise."""
    return render_feedback(ctx) if ctx.history else render_initial(ctx)


@dataclass(frozen=True)
class Extraction:
    weights: RewardWeights
    line: str


def extract_weights(reply: str) -> Extraction:
    """Parse the last ``reward = ...`` line of a free-form reply.

    Code fences, inline backticks, quote markers and list bullets around the
    line are ignored.
    """
    candidates = []
    for raw in reply.splitlines():
        m = _CANDIDATE.match(raw)
        if m:
            candidates.append(m.group(1).strip())
    if not candidates:
        raise ExtractionError("reply contains no 'reward = ...' line", reply)
    line = candidates[-1]
    try:
        return Extraction(parse_weight_file(line), line)
    except WeightFileError as exc:
        raise ExtractionError(f"could not parse reward line: {exc}", reply, line) from exc
