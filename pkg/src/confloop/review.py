"""Expert decision gate over agent-proposed confounders.

Decisions are per candidate, so an expert can accept part of a proposal.
Rejecting everything routes the orchestrator back to the agent (bounded by
``max_rework``); the optional feedback text is appended to the re-run's
reasoning prompt.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

from .agent import ConfounderSet

log = logging.getLogger(__name__)

ACCEPT = "accept"
REJECT = "reject"

DEFAULT_MAX_REWORK = 2


class ReviewError(RuntimeError):
    pass


class ReviewConfigError(ReviewError):
    """Scripted policy has no entry for a candidate."""


class ReviewTimeout(ReviewError):
    """Interactive policy exceeded its wait budget."""


@dataclass
class ReviewItem:
    """One pending decision: the candidate set of a single agent pass."""

    item_id: str
    run_id: str
    iteration: int
    rework: int
    candidates: ConfounderSet
    status: str = "pending"
    decisions: dict[str, str] = field(default_factory=dict)
    decided_by: str = ""
    feedback: str | None = None
    decided_at: float | None = None

    def candidate_names(self) -> list[str]:
        return self.candidates.names()

    def mark_decided(self, decisions: Mapping[str, str], decided_by: str,
                     feedback: str | None = None) -> None:
        if self.status == "decided":
            raise ReviewError(f"item {self.item_id} is already decided")
        missing = set(self.candidate_names()) - set(decisions)
        if missing:
            raise ReviewError(f"missing decisions for {sorted(missing)}")
        unknown = set(decisions) - set(self.candidate_names())
        if unknown:
            raise ReviewError(f"decisions for unknown candidates {sorted(unknown)}")
        bad = [v for v in decisions.values() if v not in (ACCEPT, REJECT)]
        if bad:
            raise ReviewError(f"decision values must be accept/reject, got {bad[0]!r}")
        self.decisions = {k: decisions[k] for k in self.candidate_names()}
        self.decided_by = decided_by
        self.feedback = feedback
        self.status = "decided"
        self.decided_at = time.time()

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "run_id": self.run_id,
            "iteration": self.iteration,
            "rework": self.rework,
            "candidates": self.candidates.to_dict(),
            "status": self.status,
            "decisions": dict(self.decisions),
            "decided_by": self.decided_by,
            "feedback": self.feedback,
        }


@dataclass(frozen=True)
class DecisionResult:
    accepted: tuple[str, ...]
    rejected: tuple[str, ...]
    feedback: str | None
    decided_by: str


class ExpertPolicy(Protocol):
    name: str

    def decide(self, item: ReviewItem) -> tuple[dict[str, str], str | None]:
        """Return (decisions for every candidate, optional feedback)."""
        ...


class AutoAcceptPolicy:
    name = "auto_accept"

    def decide(self, item: ReviewItem) -> tuple[dict[str, str], str | None]:
        return {name: ACCEPT for name in item.candidate_names()}, None


class ScriptedPolicy:
    """Fixture-driven decisions, keyed by candidate name.

    Fixture: ``{"decisions": {"DM": "accept", ...}, "default": "reject",
    "feedback": "..."}``. A candidate with no entry and no default is a
    configuration error.
    """

    name = "scripted"

    def __init__(self, fixture: Mapping | str | Path):
        if isinstance(fixture, (str, Path)):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self.by_name: dict[str, str] = dict(fixture.get("decisions", {}))
        self.default: str | None = fixture.get("default")
        self.feedback: str | None = fixture.get("feedback")

    def decide(self, item: ReviewItem) -> tuple[dict[str, str], str | None]:
        decisions = {}
        for name in item.candidate_names():
            verdict = self.by_name.get(name, self.default)
            if verdict is None:
                raise ReviewConfigError(f"scripted policy has no decision for {name!r}")
            if verdict not in (ACCEPT, REJECT):
                raise ReviewConfigError(f"scripted decision for {name!r} must be accept/reject")
            decisions[name] = verdict
        feedback = self.feedback if all(v == REJECT for v in decisions.values()) else None
        return decisions, feedback


class InteractivePolicy:
    """Blocks until the review service records a decision for the item.

    ``submit`` registers the pending item with a waitable event (the HTTP
    layer publishes it); ``decide`` waits, with no timeout by default.
    """

    name = "interactive"

    def __init__(self, register, poll_interval: float = 0.05, timeout: float | None = None):
        # register(item) -> threading.Event set once the item is decided
        self._register = register
        self.poll_interval = poll_interval
        self.timeout = timeout

    def decide(self, item: ReviewItem) -> tuple[dict[str, str], str | None]:
        event: threading.Event = self._register(item)
        deadline = None if self.timeout is None else time.monotonic() + self.timeout
        while not event.wait(self.poll_interval):
            if deadline is not None and time.monotonic() > deadline:
                raise ReviewTimeout(f"no decision for {item.item_id} within {self.timeout}s")
        if item.status != "decided":
            raise ReviewError(f"item {item.item_id} unblocked without decisions")
        return dict(item.decisions), item.feedback


def request_decision(cs: ConfounderSet, policy: ExpertPolicy, item: ReviewItem) -> DecisionResult:
    """Run one decision round over a non-empty candidate set."""
    if not cs:
        raise ReviewError("empty candidate sets bypass review")
    decisions, feedback = policy.decide(item)
    if item.status != "decided":
        item.mark_decided(decisions, policy.name, feedback)
    names = item.candidate_names()
    accepted = tuple(n for n in names if item.decisions[n] == ACCEPT)
    rejected = tuple(n for n in names if item.decisions[n] == REJECT)
    log.info("review %s: accepted=%s rejected=%s by %s",
             item.item_id, list(accepted), list(rejected), item.decided_by)
    return DecisionResult(accepted, rejected, item.feedback, item.decided_by)
