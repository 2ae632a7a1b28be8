"""The iterative refinement loop and the final mixture-of-trees predictor.

Per iteration: propose confounders from the current trees' rules, gate them
through the expert policy (with bounded rework on full rejection), stratify
the active samples on everything validated so far, refit one tree per
surviving stratum, pool per-sample bootstrap intervals across strata, and
carry only the unstable samples forward. The loop ends when an iteration
accepts nothing, when bounds are hit, or when the covariate pool runs dry.

Prediction traces backward: the last iteration whose stratum levels match
the query answers it; iteration 0 is unrestricted and always matches.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .agent import AgentSettings, ConfounderSet, run_agent_iteration
from .agent.backends import AgentBackend
from .bootstrap_ci import CIRecord, bag, fit_ensemble, predict_ci, stability_filter
from .causal_tree import (
    Leaf,
    Partition,
    SplitRule,
    Tree,
    TreeFitError,
    assign_leaf,
    fit_tree,
    tree_from_dict,
    tree_to_dict,
)
from .config import RunConfig
from .dataset import (
    Dataset,
    RestrictionContext,
    apply_restriction,
    remaining_covariates,
    split_dataset,
)
from .knowledge import Index, ToolSource
from .agent import prompt_hashes
from .review import ExpertPolicy, ReviewItem, request_decision
from .seeding import derive_seed
from .tracing import TraceRecorder

log = logging.getLogger(__name__)

TERM_EMPTY = "empty C'"
TERM_MAX_ITERATIONS = "max iterations reached"
TERM_MIN_ACTIVE = "active set below minimum"
TERM_POOL_EXHAUSTED = "covariate pool exhausted"


class PipelineError(RuntimeError):
    pass


class StatusSink(Protocol):
    """Receives progress so a service (and its UI) can watch a live run."""

    def publish_report(self, run_id: str, report: dict) -> None: ...

    def publish_trace(self, run_id: str, iteration: int, events: list[dict]) -> None: ...

    def publish_review(self, run_id: str, item: ReviewItem) -> None: ...


@dataclass
class IterationState:
    """Working set of one loop pass; active sets only ever shrink."""

    index: int
    active_train: frozenset[str]
    active_est: frozenset[str]
    active_test: frozenset[str]
    covariate_pool: list[str]
    validated: list[str]
    partition: Partition | None = None
    confounder_set: ConfounderSet | None = None


@dataclass(frozen=True)
class StratumModel:
    restriction: RestrictionContext
    tree: Tree

    def to_dict(self) -> dict:
        return {"restriction": self.restriction.to_dict(), "tree": tree_to_dict(self.tree)}


@dataclass(frozen=True)
class IterationModel:
    index: int
    entries: tuple[StratumModel, ...]
    stable_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "entries": [e.to_dict() for e in self.entries],
            "stable_ids": list(self.stable_ids),
        }


@dataclass(frozen=True)
class FinalModel:
    """Ordered per-iteration trees with their restriction contexts."""

    iterations: tuple[IterationModel, ...]
    validated: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.iterations or self.iterations[0].index != 0:
            raise PipelineError("a final model must start with the unrestricted iteration 0")
        if self.iterations[0].entries[0].restriction.confounders:
            raise PipelineError("iteration 0 must be unrestricted")

    def to_dict(self) -> dict:
        return {
            "iterations": [m.to_dict() for m in self.iterations],
            "validated": list(self.validated),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FinalModel":
        iterations = tuple(
            IterationModel(
                index=int(m["index"]),
                entries=tuple(
                    StratumModel(
                        restriction=RestrictionContext(
                            tuple(e["restriction"]["confounders"]),
                            dict(e["restriction"]["stratum"]),
                        ),
                        tree=tree_from_dict(e["tree"]),
                    )
                    for e in m["entries"]
                ),
                stable_ids=tuple(m["stable_ids"]),
            )
            for m in d["iterations"]
        )
        return cls(iterations=iterations, validated=tuple(d["validated"]), test_ids=tuple(d["test_ids"]))


def predict_final(model: FinalModel, x: Mapping[str, object]) -> dict:
    """Backward-traced prediction: latest matching stratum wins."""
    for iteration in reversed(model.iterations):
        for entry in iteration.entries:
            ctx = entry.restriction
            if ctx.confounders and not ctx.matches(x):
                continue
            leaf = assign_leaf(entry.tree, x)
            return {
                "cate": leaf.cate,
                "iteration": iteration.index,
                "leaf_id": leaf.id,
                "tree_id": entry.tree.tree_id,
            }
    raise PipelineError("no iteration matched; iteration 0 should always match")


def composite_partition(entries: Sequence[StratumModel], iteration: int) -> Partition:
    """Merge per-stratum trees into one rule set for the next agent pass.

    Each leaf path gains its stratum's confounder conjuncts, so the agent
    sees the full condition defining the subgroup.
    """
    leaves: list[Leaf] = []
    for entry in entries:
        ctx = entry.restriction
        prefix = tuple(SplitRule(c, "==", ctx.stratum[c]) for c in ctx.confounders)
        for leaf in entry.tree.leaves:
            leaves.append(
                Leaf(
                    id=len(leaves),
                    path=prefix + leaf.path,
                    cate=leaf.cate,
                    n_treated=leaf.n_treated,
                    n_control=leaf.n_control,
                )
            )
    return Partition(tuple(leaves), f"it{iteration}-rules", entries[0].tree.params)


def _arms_ok(ds: Dataset, ids: Sequence[str], per_arm: int) -> bool:
    w = ds.treatments()[ds.row_indices(ids)]
    treated = int((w == 1).sum())
    return treated >= per_arm and (len(ids) - treated) >= per_arm


@dataclass
class _RunArtifacts:
    rows: list[dict] = field(default_factory=list)
    ci_records: dict[int, list[CIRecord]] = field(default_factory=dict)
    review_items: list[ReviewItem] = field(default_factory=list)


def run_pipeline(
    ds: Dataset,
    cfg: RunConfig,
    backend: AgentBackend,
    policy: ExpertPolicy,
    index: Index | None = None,
    tools: Sequence[ToolSource] = (),
    out_dir: str | Path | None = None,
    run_id: str = "run",
    sink: StatusSink | None = None,
) -> tuple[dict, FinalModel]:
    """Execute the full loop; returns (run report dict, final model).

    The baseline iteration 0 fits an unrestricted tree and its bootstrap
    intervals before any agent involvement. On an unexpected stage failure
    the partial report is persisted before the error propagates.
    """
    recorder = TraceRecorder()
    artifacts = _RunArtifacts()
    seed = cfg.split.seed
    settings = cfg.agent_settings()
    split = split_dataset(ds, cfg.split.ratios, seed)
    pool = list(ds.covariate_names)
    validated: list[str] = []
    model_iterations: list[IterationModel] = []
    termination = None

    def build_report(final_assignments: dict | None = None) -> dict:
        return {
            "config": cfg.to_dict(),
            "prompt_hashes": prompt_hashes(),
            "split_sizes": {
                "train": len(split.train),
                "estimation": len(split.estimation),
                "test": len(split.test),
            },
            "iterations": artifacts.rows,
            "validated": list(validated),
            "termination_reason": termination,
            "final_assignments": final_assignments or {},
        }

    def publish() -> None:
        if sink is not None:
            sink.publish_report(run_id, build_report())

    try:
        # Iteration 0: unrestricted baseline, agent-independent.
        t0 = fit_tree(
            ds, sorted(split.train), pool,
            replace(cfg.tree, seed=derive_seed(seed, "fit", 0)),
            tree_id="it0",
        )
        bags0 = bag(sorted(split.estimation), cfg.bootstrap.b, derive_seed(seed, "bag", 0))
        ens0 = fit_ensemble(
            ds, bags0, pool, cfg.tree,
            seed=derive_seed(seed, "ens", 0), parallelism=cfg.fit_parallelism,
        )
        records0 = predict_ci(ens0, ds, split.test, cfg.bootstrap.alpha)
        report0 = stability_filter(records0)
        artifacts.ci_records[0] = records0
        artifacts.rows.append(_iteration_row(0, [], validated, report0, [""]))
        model_iterations.append(
            IterationModel(0, (StratumModel(RestrictionContext(()), t0),), tuple(sorted(report0.stable_ids)))
        )
        agent_partition = composite_partition(model_iterations[0].entries, 0)
        active_train = split.train
        active_est = split.estimation
        active_test = frozenset(report0.unstable_ids)
        publish()

        k = 0
        while True:
            k += 1
            if k > cfg.loop.max_iterations:
                termination = TERM_MAX_ITERATIONS
                break
            if len(active_test) < cfg.loop.min_active_samples:
                termination = TERM_MIN_ACTIVE
                break
            if not pool:
                termination = TERM_POOL_EXHAUSTED
                break

            accepted = _agent_review_round(
                agent_partition, index, tools, backend, policy, ds, validated,
                settings, cfg.review.max_rework, k, run_id, recorder, artifacts, sink,
            )
            if not accepted:
                termination = TERM_EMPTY
                recorder.flush_iteration(k)
                break

            validated.extend(accepted)
            pool = remaining_covariates(ds, validated)
            if not pool:
                termination = TERM_POOL_EXHAUSTED
                artifacts.rows.append(_iteration_row(k, accepted, validated, None, []))
                recorder.flush_iteration(k)
                break

            ctx = RestrictionContext(tuple(validated))
            min_stratum = cfg.loop.min_stratum_size
            train_strata = apply_restriction(active_train, ctx, ds, min_stratum)
            est_strata = apply_restriction(active_est, ctx, ds, min_stratum_size=1)
            test_strata = apply_restriction(active_test, ctx, ds, min_stratum_size=1)

            entries: list[StratumModel] = []
            records: list[CIRecord] = []
            kept_train: set[str] = set()
            kept_est: set[str] = set()
            need = 2 * cfg.tree.min_leaf_per_arm
            for key in sorted(train_strata):
                train_ids = sorted(train_strata[key])
                est_ids = sorted(est_strata.get(key, ()))
                if not _arms_ok(ds, train_ids, need) or not est_ids or not _arms_ok(ds, est_ids, need):
                    log.warning("iteration %d: stratum %s not viable for fitting; dropped", k, key)
                    recorder.record("filter", stage="filter", event="stratum_dropped",
                                    stratum=key, train=len(train_ids), est=len(est_ids))
                    continue
                member = ds.sample(train_ids[0]).covariates
                stratum_ctx = ctx.with_stratum({c: str(member[c]) for c in ctx.confounders})
                tree = fit_tree(
                    ds, train_ids, pool,
                    replace(cfg.tree, seed=derive_seed(seed, "fit", k, key)),
                    tree_id=f"it{k}|{key}",
                )
                entries.append(StratumModel(stratum_ctx, tree))
                kept_train.update(train_ids)
                kept_est.update(est_ids)
                test_ids = sorted(test_strata.get(key, ()))
                if test_ids:
                    bags = bag(est_ids, cfg.bootstrap.b, derive_seed(seed, "bag", k, key))
                    ens = fit_ensemble(
                        ds, bags, pool, cfg.tree,
                        seed=derive_seed(seed, "ens", k, key), parallelism=cfg.fit_parallelism,
                    )
                    records.extend(predict_ci(ens, ds, test_ids, cfg.bootstrap.alpha))

            if not entries:
                termination = TERM_MIN_ACTIVE
                artifacts.rows.append(_iteration_row(k, accepted, validated, None, []))
                recorder.flush_iteration(k)
                break

            stratum_keys = [e.restriction.key() for e in entries]
            if records:
                sreport = stability_filter(records)
                artifacts.ci_records[k] = records
                artifacts.rows.append(_iteration_row(k, accepted, validated, sreport, stratum_keys))
                stable = tuple(sorted(sreport.stable_ids))
                active_test = frozenset(sreport.unstable_ids)
            else:
                artifacts.rows.append(_iteration_row(k, accepted, validated, None, stratum_keys))
                stable = ()
                active_test = frozenset()

            model_iterations.append(IterationModel(k, tuple(entries), stable))
            agent_partition = composite_partition(entries, k)
            active_train = frozenset(kept_train)
            active_est = frozenset(kept_est)
            recorder.flush_iteration(k)
            publish()

        model = FinalModel(
            iterations=tuple(model_iterations),
            validated=tuple(validated),
            test_ids=tuple(sorted(split.test)),
        )
        final_assignments = {
            sid: predict_final(model, ds.sample(sid).covariates) for sid in model.test_ids
        }
        report = build_report(final_assignments)
        if out_dir is not None:
            persist_run(out_dir, report, model, artifacts, recorder)
        if sink is not None:
            sink.publish_report(run_id, report)
            for row in artifacts.rows:
                sink.publish_trace(run_id, row["index"],
                                   [e for e in recorder.events if e.get("iteration") == row["index"]])
        return report, model

    except Exception as exc:
        termination = f"aborted: {exc}"
        recorder.flush_iteration(-1)
        if out_dir is not None:
            try:
                persist_run(out_dir, build_report(), None, artifacts, recorder)
            except Exception:  # pragma: no cover - best-effort persistence
                log.exception("failed to persist partial run state")
        publish()
        raise


def _iteration_row(
    index: int,
    new_confounders: Sequence[str],
    validated: Sequence[str],
    sreport,
    stratum_keys: Sequence[str],
) -> dict:
    row = {
        "index": index,
        "new_confounders": list(new_confounders),
        "validated_total": list(validated),
        "strata": list(stratum_keys),
        "mean_ci_width": None,
        "stable_count": 0,
        "unstable_count": 0,
    }
    if sreport is not None:
        row["mean_ci_width"] = sreport.threshold
        row["stable_count"] = len(sreport.stable_ids)
        row["unstable_count"] = len(sreport.unstable_ids)
    return row


def _agent_review_round(
    partition: Partition,
    index: Index | None,
    tools: Sequence[ToolSource],
    backend: AgentBackend,
    policy: ExpertPolicy,
    ds: Dataset,
    validated: Sequence[str],
    settings: AgentSettings,
    max_rework: int,
    iteration: int,
    run_id: str,
    recorder: TraceRecorder,
    artifacts: _RunArtifacts,
    sink: StatusSink | None,
) -> list[str]:
    """One agent proposal plus expert gate, re-running on full rejection.

    Returns the accepted names (possibly empty after rework exhaustion or an
    empty proposal, both of which end the loop).
    """
    feedback: str | None = None
    rejected_so_far: list[str] = []
    for attempt in range(max_rework + 1):
        cs = run_agent_iteration(
            partition, index, tools, backend, ds.meta, validated,
            settings, iteration, recorder, feedback=feedback, rejected=rejected_so_far,
        )
        if not cs:
            return []
        item = ReviewItem(
            item_id=f"it{iteration}-r{attempt}",
            run_id=run_id,
            iteration=iteration,
            rework=attempt,
            candidates=cs,
        )
        if sink is not None and policy.name != "interactive":
            sink.publish_review(run_id, item)
        decision = request_decision(cs, policy, item)
        artifacts.review_items.append(item)
        if sink is not None:
            sink.publish_review(run_id, item)
        recorder.record(
            "review", stage="review", call_index=attempt,
            item_id=item.item_id,
            accepted=list(decision.accepted), rejected=list(decision.rejected),
            decided_by=decision.decided_by, feedback=decision.feedback,
        )
        if decision.accepted:
            return list(decision.accepted)
        rejected_so_far.extend(n for n in decision.rejected if n not in rejected_so_far)
        feedback = decision.feedback
        log.info("iteration %d: full rejection (attempt %d/%d)", iteration, attempt + 1, max_rework + 1)
    return []


def persist_run(
    out_dir: str | Path,
    report: dict,
    model: FinalModel | None,
    artifacts: _RunArtifacts,
    recorder: TraceRecorder,
) -> Path:
    """Write report, model, CI records, review log, and trace under a run dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False), encoding="utf-8"
    )
    if model is not None:
        (out / "final_model.json").write_text(
            json.dumps(model.to_dict(), sort_keys=True, indent=2), encoding="utf-8"
        )
    for iteration, records in sorted(artifacts.ci_records.items()):
        (out / f"ci_records_{iteration}.json").write_text(
            json.dumps([r.to_dict() for r in records], sort_keys=True, indent=2), encoding="utf-8"
        )
    (out / "reviews.json").write_text(
        json.dumps([item.to_dict() for item in artifacts.review_items], sort_keys=True, indent=2),
        encoding="utf-8",
    )
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for event in recorder.events:
            fh.write(json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n")
    return out


def load_model(path: str | Path) -> FinalModel:
    return FinalModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
