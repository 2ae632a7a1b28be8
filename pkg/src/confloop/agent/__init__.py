"""Agent workflow: explain tree subgroups, decompose into sub-queries,
gather knowledge, reason candidate confounders, and ensemble the votes.

Candidates naming covariates that do not exist are filtered as
hallucinations; candidates naming already-validated confounders are
dropped. The ensemble keeps names proposed by at least ``min_votes``
distinct rules (1 for a single-rule partition, else 2 by default).
"""

from __future__ import annotations

import hashlib
import logging
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeVar

from ..causal_tree import Partition, Rule, extract_rules
from ..dataset import CovariateMeta
from ..knowledge import GatherConfig, Index, KnowledgeItem, ToolSource, gather
from ..tracing import TraceRecorder, prompt_sha
from .backends import AgentBackend, BackendError, SchemaViolationError

log = logging.getLogger(__name__)

_PROMPT_DIR = Path(__file__).parent / "prompts"

T = TypeVar("T")
U = TypeVar("U")

NARRATIVE_SCHEMA = {
    "type": "object",
    "properties": {"narrative": {"type": "string"}},
    "required": ["narrative"],
}

SUBQUERY_SCHEMA = {
    "type": "object",
    "properties": {
        "subqueries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "text": {"type": "string", "minLength": 1},
                    "source": {"enum": ["rag", "tool"]},
                },
                "required": ["text"],
            },
        }
    },
    "required": ["subqueries"],
}

CONFOUNDER_SCHEMA = {
    "type": "object",
    "properties": {
        "confounders": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "rationale": {"type": "string"},
                },
                "required": ["name"],
            },
        }
    },
    "required": ["confounders"],
}


def load_prompt(stage: str) -> string.Template:
    return string.Template((_PROMPT_DIR / f"{stage}.txt").read_text(encoding="utf-8"))


def prompt_hashes() -> dict[str, str]:
    """SHA-256 of each shipped template; recorded in run reports for audit."""
    return {
        p.stem: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(_PROMPT_DIR.glob("*.txt"))
    }


@dataclass(frozen=True)
class SubQuery:
    rule_leaf_id: int
    text: str
    source_pref: str = "rag"

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("sub-query text must be non-empty")
        if self.source_pref not in ("rag", "tool"):
            raise ValueError(f"unknown source_pref {self.source_pref!r}")


@dataclass(frozen=True)
class EvidenceRef:
    chunk_id: str
    source: str
    provenance: str
    snippet: str

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "source": self.source,
            "provenance": self.provenance,
            "snippet": self.snippet,
        }


@dataclass(frozen=True)
class CandidateConfounder:
    covariate: str
    rationale: str
    evidence: tuple[EvidenceRef, ...]
    rule_leaf_id: int


@dataclass(frozen=True)
class ConfounderVote:
    covariate: str
    vote_count: int
    rationales: tuple[str, ...]
    evidence: tuple[EvidenceRef, ...]

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "vote_count": self.vote_count,
            "rationales": list(self.rationales),
            "evidence": [e.to_dict() for e in self.evidence],
        }


@dataclass(frozen=True)
class ConfounderSet:
    confounders: tuple[ConfounderVote, ...]
    provenance: Mapping[int, tuple[str, ...]]  # leaf id -> proposed names

    def names(self) -> list[str]:
        return [c.covariate for c in self.confounders]

    def __bool__(self) -> bool:
        return bool(self.confounders)

    def to_dict(self) -> dict:
        return {
            "confounders": [c.to_dict() for c in self.confounders],
            "provenance": {str(k): list(v) for k, v in sorted(self.provenance.items())},
        }


@dataclass(frozen=True)
class AgentSettings:
    max_subqueries: int = 4
    min_votes: int | None = None  # None -> 1 for single-rule partitions, else 2
    self_consistency: int = 1
    parallelism: int = 2
    knowledge: GatherConfig = field(default_factory=GatherConfig)


def _ordered_map(fn: Callable[[T], U], items: Sequence[T], workers: int) -> list[U]:
    """Map preserving input order; bounded thread pool when workers > 1."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _describe(descriptions: Mapping[str, str]) -> str:
    if not descriptions:
        return "(none)"
    return "\n".join(f"- {name}: {desc}" for name, desc in sorted(descriptions.items()))


def _call(
    backend: AgentBackend,
    stage: str,
    prompt: str,
    schema: Mapping,
    recorder: TraceRecorder | None,
    iteration: int,
    leaf_id: int | None,
    call_index: int = 0,
) -> dict:
    context = {"iteration": iteration, "stage": stage, "leaf_id": leaf_id, "call_index": call_index}
    response = None
    error = None
    try:
        response = backend.complete(prompt, schema, context)
        return response
    except BackendError as exc:
        error = str(exc)
        raise
    finally:
        if recorder is not None:
            recorder.record(
                "backend_call",
                stage=stage,
                leaf_id=leaf_id,
                call_index=call_index,
                prompt_sha256=prompt_sha(prompt),
                prompt=prompt,
                response=response,
                error=error,
            )


def explain_partition(
    p: Partition,
    backend: AgentBackend,
    meta: Sequence[CovariateMeta],
    recorder: TraceRecorder | None = None,
    iteration: int = 1,
    settings: AgentSettings = AgentSettings(),
) -> list[Rule]:
    """One narrative per leaf, via one backend call per leaf.

    A backend that keeps failing degrades to an empty narrative rather than
    aborting the iteration.
    """
    rules = extract_rules(p, meta)
    template = load_prompt("explain")

    def explain_one(rule: Rule) -> Rule:
        prompt = template.substitute(
            rule_text=rule.text,
            cate=f"{rule.cate:.6g}",
            n_treated=rule.n_treated,
            n_control=rule.n_control,
            covariate_descriptions=_describe(rule.covariate_descriptions),
        )
        try:
            response = _call(backend, "explain", prompt, NARRATIVE_SCHEMA, recorder, iteration, rule.leaf_id)
            return rule.with_narrative(str(response["narrative"]))
        except BackendError as exc:
            log.warning("explain degraded for leaf %d: %s", rule.leaf_id, exc)
            if recorder is not None:
                recorder.record("filter", stage="filter", leaf_id=rule.leaf_id,
                                event="explain_degraded", detail=str(exc))
            return rule

    return _ordered_map(explain_one, rules, settings.parallelism)


def decompose(
    rule: Rule,
    backend: AgentBackend,
    recorder: TraceRecorder | None = None,
    iteration: int = 1,
    settings: AgentSettings = AgentSettings(),
) -> list[SubQuery]:
    """Split a rule into focused knowledge sub-queries.

    Falls back to one templated question per conjunct when the backend
    cannot produce a valid decomposition.
    """
    template = load_prompt("decompose")
    prompt = template.substitute(
        rule_text=rule.text,
        cate=f"{rule.cate:.6g}",
        narrative=rule.narrative or "(not available)",
        covariate_descriptions=_describe(rule.covariate_descriptions),
        max_subqueries=settings.max_subqueries,
    )
    try:
        response = _call(backend, "decompose", prompt, SUBQUERY_SCHEMA, recorder, iteration, rule.leaf_id)
        subqueries = [
            SubQuery(rule.leaf_id, str(sq["text"]), str(sq.get("source", "rag")))
            for sq in response["subqueries"][: settings.max_subqueries]
        ]
        return subqueries
    except BackendError as exc:
        log.warning("decompose fell back to templates for leaf %d: %s", rule.leaf_id, exc)
        if recorder is not None:
            recorder.record("filter", stage="filter", leaf_id=rule.leaf_id,
                            event="decompose_fallback", detail=str(exc))
        fallback = []
        for cond in rule.conjunction:
            description = rule.covariate_descriptions.get(cond.covariate, cond.covariate)
            fallback.append(
                SubQuery(rule.leaf_id, f"How does {description} affect the outcome under the treatment?")
            )
        return fallback


def _knowledge_block(knowledge: Sequence[tuple[SubQuery, list[KnowledgeItem]]]) -> str:
    lines = []
    for sq, items in knowledge:
        lines.append(f"Question: {sq.text}")
        if not items:
            lines.append("  (none retrieved)")
        for item in items:
            snippet = item.chunk.text[:240].replace("\n", " ")
            lines.append(f"  [{item.provenance}:{item.chunk.id}] {snippet}")
    return "\n".join(lines) if lines else "(none retrieved)"


def reason_confounders(
    rule: Rule,
    knowledge: Sequence[tuple[SubQuery, list[KnowledgeItem]]],
    backend: AgentBackend,
    meta: Sequence[CovariateMeta],
    validated: Sequence[str] = (),
    recorder: TraceRecorder | None = None,
    iteration: int = 1,
    settings: AgentSettings = AgentSettings(),
    feedback: str | None = None,
    rejected: Sequence[str] = (),
) -> list[CandidateConfounder]:
    """Name candidate confounders for one rule, filtered against metadata.

    Hallucinated names (absent from metadata) and already-validated names
    are dropped with logged events. ``feedback``/``rejected`` carry expert
    rework context into the prompt.
    """
    known = {m.name: m.description for m in meta}
    validated_set = set(validated)
    catalog = {n: d for n, d in known.items() if n not in validated_set}
    template = load_prompt("reason")
    feedback_section = ""
    if rejected:
        feedback_section += f"The expert rejected these earlier proposals: {', '.join(sorted(rejected))}.\n"
    if feedback:
        feedback_section += f"Expert feedback: {feedback}\n"

    prompt = template.substitute(
        rule_text=rule.text,
        cate=f"{rule.cate:.6g}",
        narrative=rule.narrative or "(not available)",
        knowledge=_knowledge_block(knowledge),
        covariate_catalog=_describe(catalog),
        validated=", ".join(sorted(validated_set)) or "(none)",
        feedback_section=feedback_section,
    )

    evidence = tuple(
        EvidenceRef(
            chunk_id=item.chunk.id,
            source=item.chunk.source,
            provenance=item.provenance,
            snippet=item.chunk.text[:240],
        )
        for _, items in knowledge
        for item in items
    )

    candidates: list[CandidateConfounder] = []
    seen: set[str] = set()
    for sample_idx in range(max(1, settings.self_consistency)):
        try:
            response = _call(backend, "reason", prompt, CONFOUNDER_SCHEMA, recorder,
                             iteration, rule.leaf_id, call_index=sample_idx)
        except BackendError as exc:
            log.warning("reason produced nothing for leaf %d: %s", rule.leaf_id, exc)
            if recorder is not None:
                recorder.record("filter", stage="filter", leaf_id=rule.leaf_id,
                                event="reason_failed", detail=str(exc))
            continue
        for entry in response["confounders"]:
            name = str(entry["name"])
            if name not in known:
                log.warning("hallucinated covariate %r dropped (leaf %d)", name, rule.leaf_id)
                if recorder is not None:
                    recorder.record("filter", stage="filter", leaf_id=rule.leaf_id,
                                    event="hallucination_dropped", name=name)
                continue
            if name in validated_set:
                if recorder is not None:
                    recorder.record("filter", stage="filter", leaf_id=rule.leaf_id,
                                    event="already_validated_dropped", name=name)
                continue
            if name in seen:
                continue
            seen.add(name)
            candidates.append(
                CandidateConfounder(
                    covariate=name,
                    rationale=str(entry.get("rationale", "")),
                    evidence=evidence,
                    rule_leaf_id=rule.leaf_id,
                )
            )
    return candidates


def ensemble(
    per_rule: Mapping[int, Sequence[CandidateConfounder]],
    min_votes: int | None = None,
) -> ConfounderSet:
    """Aggregate per-rule candidates by cross-rule vote count.

    ``min_votes`` defaults to 1 when only one rule was processed, else 2.
    Output is ordered by vote count descending, then name.
    """
    if not per_rule:
        raise ValueError("ensemble needs at least one processed rule")
    if min_votes is None:
        min_votes = 1 if len(per_rule) == 1 else 2

    votes: dict[str, set[int]] = {}
    rationales: dict[str, list[str]] = {}
    evidence: dict[str, list[EvidenceRef]] = {}
    for leaf_id in sorted(per_rule):
        for cand in per_rule[leaf_id]:
            votes.setdefault(cand.covariate, set()).add(leaf_id)
            if cand.rationale:
                rationales.setdefault(cand.covariate, []).append(cand.rationale)
            seen_ids = {e.chunk_id for e in evidence.get(cand.covariate, [])}
            evidence.setdefault(cand.covariate, []).extend(
                e for e in cand.evidence if e.chunk_id not in seen_ids
            )

    members = [
        ConfounderVote(
            covariate=name,
            vote_count=len(leaf_ids),
            rationales=tuple(dict.fromkeys(rationales.get(name, []))),
            evidence=tuple(evidence.get(name, [])[:6]),
        )
        for name, leaf_ids in votes.items()
        if len(leaf_ids) >= min_votes
    ]
    members.sort(key=lambda c: (-c.vote_count, c.covariate))
    provenance = {
        leaf_id: tuple(sorted({c.covariate for c in cands}))
        for leaf_id, cands in per_rule.items()
    }
    return ConfounderSet(confounders=tuple(members), provenance=provenance)


def run_agent_iteration(
    p: Partition,
    index: Index | None,
    tools: Sequence[ToolSource],
    backend: AgentBackend,
    meta: Sequence[CovariateMeta],
    validated: Sequence[str] = (),
    settings: AgentSettings = AgentSettings(),
    iteration: int = 1,
    recorder: TraceRecorder | None = None,
    feedback: str | None = None,
    rejected: Sequence[str] = (),
) -> ConfounderSet:
    """Full proposal pass: explain -> decompose -> gather -> reason -> ensemble."""
    rules = explain_partition(p, backend, meta, recorder, iteration, settings)

    def process_rule(rule: Rule) -> tuple[int, list[CandidateConfounder]]:
        subqueries = decompose(rule, backend, recorder, iteration, settings)
        knowledge: list[tuple[SubQuery, list[KnowledgeItem]]] = []
        for sq in subqueries:
            traces = []
            items = gather(index, tools, sq.text, settings.knowledge,
                           source_pref=sq.source_pref, trace_out=traces)
            knowledge.append((sq, items))
            if recorder is not None:
                for t in traces:
                    recorder.record("gather", stage="gather", leaf_id=rule.leaf_id, **t.to_dict())
        candidates = reason_confounders(
            rule, knowledge, backend, meta, validated, recorder, iteration,
            settings, feedback=feedback, rejected=rejected,
        )
        return rule.leaf_id, candidates

    results = _ordered_map(process_rule, rules, settings.parallelism)
    per_rule = {leaf_id: cands for leaf_id, cands in results}
    result = ensemble(per_rule, settings.min_votes)
    if recorder is not None:
        recorder.record("ensemble", stage="ensemble",
                        members=[c.to_dict() for c in result.confounders],
                        min_votes=settings.min_votes,
                        rule_count=len(per_rule))
    return result
