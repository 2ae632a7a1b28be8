"""Run configuration: one structured file drives a whole reproducible run.

Defaults pin the protocol constants (64 bootstrap replicates, 95% intervals,
retrieve 10 / keep 3) and the loop bounds. CLI flags override file values;
output location and timestamps stay out of the snapshot so two runs with the
same config serialize identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .agent import AgentSettings
from .agent.backends import BackendConfig
from .causal_tree import TreeParams
from .dataset import DEFAULT_MIN_STRATUM_SIZE
from .knowledge import (
    DEFAULT_K_KEEP,
    DEFAULT_K_RETRIEVE,
    DEFAULT_MIN_EFFECTIVE_SCORE,
    GatherConfig,
)
from .review import DEFAULT_MAX_REWORK


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.4, 0.4, 0.2)
    seed: int = 0


@dataclass(frozen=True)
class BootstrapSpec:
    b: int = 64
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if self.b < 1:
            raise ConfigError("bootstrap.b must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("bootstrap.alpha must be in (0, 1)")


@dataclass(frozen=True)
class AgentSpec:
    backend_kind: str = "mock"          # mock | http
    mock_fixture: str = ""              # path, for mock
    http: BackendConfig = field(default_factory=BackendConfig)
    max_subqueries: int = 4
    self_consistency: int = 1
    parallelism: int = 2

    def __post_init__(self) -> None:
        if self.backend_kind not in ("mock", "http"):
            raise ConfigError(f"agent.backend_kind must be mock or http, got {self.backend_kind!r}")


@dataclass(frozen=True)
class KnowledgeSpec:
    corpus_dir: str = ""
    tool_dirs: tuple[str, ...] = ()
    tool_endpoints: tuple[str, ...] = ()
    k_retrieve: int = DEFAULT_K_RETRIEVE
    k_keep: int = DEFAULT_K_KEEP
    min_effective_score: float = DEFAULT_MIN_EFFECTIVE_SCORE
    chunk_size: int = 400
    chunk_overlap: int = 100
    embed_dimension: int = 256
    embed_backend: str = "hashed"       # hashed | remote


@dataclass(frozen=True)
class ReviewSpec:
    policy: str = "auto_accept"         # auto_accept | scripted | interactive
    scripted_fixture: str = ""
    max_rework: int = DEFAULT_MAX_REWORK
    timeout: float | None = None

    def __post_init__(self) -> None:
        if self.policy not in ("auto_accept", "scripted", "interactive"):
            raise ConfigError(f"review.policy unknown: {self.policy!r}")
        if self.policy == "scripted" and not self.scripted_fixture:
            raise ConfigError("review.policy=scripted requires review.scripted_fixture")


@dataclass(frozen=True)
class LoopSpec:
    max_iterations: int = 5
    min_active_samples: int = 100
    min_stratum_size: int = DEFAULT_MIN_STRATUM_SIZE

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ConfigError("loop.max_iterations must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    split: SplitSpec = field(default_factory=SplitSpec)
    tree: TreeParams = field(default_factory=TreeParams)
    bootstrap: BootstrapSpec = field(default_factory=BootstrapSpec)
    agent: AgentSpec = field(default_factory=AgentSpec)
    knowledge: KnowledgeSpec = field(default_factory=KnowledgeSpec)
    review: ReviewSpec = field(default_factory=ReviewSpec)
    loop: LoopSpec = field(default_factory=LoopSpec)
    ensemble_min_votes: int | None = None
    fit_parallelism: int = 1

    def agent_settings(self) -> AgentSettings:
        return AgentSettings(
            max_subqueries=self.agent.max_subqueries,
            min_votes=self.ensemble_min_votes,
            self_consistency=self.agent.self_consistency,
            parallelism=self.agent.parallelism,
            knowledge=GatherConfig(
                k_retrieve=self.knowledge.k_retrieve,
                k_keep=self.knowledge.k_keep,
                min_effective_score=self.knowledge.min_effective_score,
            ),
        )

    def to_dict(self) -> dict:
        return {
            "split": {"ratios": list(self.split.ratios), "seed": self.split.seed},
            "tree": self.tree.to_dict(),
            "bootstrap": {"b": self.bootstrap.b, "alpha": self.bootstrap.alpha},
            "agent": {
                "backend_kind": self.agent.backend_kind,
                "mock_fixture": self.agent.mock_fixture,
                "http": {
                    "endpoint": self.agent.http.endpoint,
                    "model": self.agent.http.model,
                    "temperature": self.agent.http.temperature,
                    "max_retries": self.agent.http.max_retries,
                },
                "max_subqueries": self.agent.max_subqueries,
                "self_consistency": self.agent.self_consistency,
                "parallelism": self.agent.parallelism,
            },
            "knowledge": {
                "corpus_dir": self.knowledge.corpus_dir,
                "tool_dirs": list(self.knowledge.tool_dirs),
                "tool_endpoints": list(self.knowledge.tool_endpoints),
                "k_retrieve": self.knowledge.k_retrieve,
                "k_keep": self.knowledge.k_keep,
                "min_effective_score": self.knowledge.min_effective_score,
                "chunk_size": self.knowledge.chunk_size,
                "chunk_overlap": self.knowledge.chunk_overlap,
                "embed_dimension": self.knowledge.embed_dimension,
                "embed_backend": self.knowledge.embed_backend,
            },
            "review": {
                "policy": self.review.policy,
                "scripted_fixture": self.review.scripted_fixture,
                "max_rework": self.review.max_rework,
                "timeout": self.review.timeout,
            },
            "loop": {
                "max_iterations": self.loop.max_iterations,
                "min_active_samples": self.loop.min_active_samples,
                "min_stratum_size": self.loop.min_stratum_size,
            },
            "ensemble_min_votes": self.ensemble_min_votes,
            "fit_parallelism": self.fit_parallelism,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        def sub(key: str) -> Mapping:
            value = d.get(key, {})
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {key!r} must be an object")
            return value

        split = sub("split")
        ratios = split.get("ratios", (0.4, 0.4, 0.2))
        if len(ratios) != 3:
            raise ConfigError("split.ratios must have three entries")
        agent = sub("agent")
        http = agent.get("http", {})
        knowledge = sub("knowledge")
        review = sub("review")
        loop = sub("loop")
        bootstrap = sub("bootstrap")
        tree = sub("tree")
        try:
            return cls(
                split=SplitSpec(ratios=tuple(float(r) for r in ratios), seed=int(split.get("seed", 0))),
                tree=TreeParams.from_dict(tree),
                bootstrap=BootstrapSpec(b=int(bootstrap.get("b", 64)), alpha=float(bootstrap.get("alpha", 0.05))),
                agent=AgentSpec(
                    backend_kind=str(agent.get("backend_kind", "mock")),
                    mock_fixture=str(agent.get("mock_fixture", "")),
                    http=BackendConfig(
                        endpoint=str(http.get("endpoint", "")),
                        model=str(http.get("model", "")),
                        temperature=float(http.get("temperature", 0.0)),
                        max_retries=int(http.get("max_retries", 3)),
                    ),
                    max_subqueries=int(agent.get("max_subqueries", 4)),
                    self_consistency=int(agent.get("self_consistency", 1)),
                    parallelism=int(agent.get("parallelism", 2)),
                ),
                knowledge=KnowledgeSpec(
                    corpus_dir=str(knowledge.get("corpus_dir", "")),
                    tool_dirs=tuple(str(t) for t in knowledge.get("tool_dirs", ())),
                    tool_endpoints=tuple(str(t) for t in knowledge.get("tool_endpoints", ())),
                    k_retrieve=int(knowledge.get("k_retrieve", DEFAULT_K_RETRIEVE)),
                    k_keep=int(knowledge.get("k_keep", DEFAULT_K_KEEP)),
                    min_effective_score=float(knowledge.get("min_effective_score", DEFAULT_MIN_EFFECTIVE_SCORE)),
                    chunk_size=int(knowledge.get("chunk_size", 400)),
                    chunk_overlap=int(knowledge.get("chunk_overlap", 100)),
                    embed_dimension=int(knowledge.get("embed_dimension", 256)),
                    embed_backend=str(knowledge.get("embed_backend", "hashed")),
                ),
                review=ReviewSpec(
                    policy=str(review.get("policy", "auto_accept")),
                    scripted_fixture=str(review.get("scripted_fixture", "")),
                    max_rework=int(review.get("max_rework", DEFAULT_MAX_REWORK)),
                    timeout=None if review.get("timeout") is None else float(review["timeout"]),
                ),
                loop=LoopSpec(
                    max_iterations=int(loop.get("max_iterations", 5)),
                    min_active_samples=int(loop.get("min_active_samples", 100)),
                    min_stratum_size=int(loop.get("min_stratum_size", DEFAULT_MIN_STRATUM_SIZE)),
                ),
                ensemble_min_votes=(None if d.get("ensemble_min_votes") is None
                                    else int(d["ensemble_min_votes"])),
                fit_parallelism=int(d.get("fit_parallelism", 1)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2), encoding="utf-8")
