"""Bagged tree ensembles and per-sample percentile confidence intervals.

For each test sample the ensemble's predictions form an empirical
distribution; the interval is its [alpha/2, 1 - alpha/2] quantile range and
the point estimate is the ensemble mean. Samples whose interval width lies
strictly above the mean width are flagged unstable; ties at the threshold
count as stable.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .causal_tree import Tree, TreeFitError, TreeParams, assign_leaf, fit_tree
from .dataset import Dataset
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

DEFAULT_B = 64
DEFAULT_ALPHA = 0.05
_MAX_REDRAWS = 5


class EnsembleFitError(RuntimeError):
    """A bag could not be fit even after redraws."""


@dataclass(frozen=True)
class BootstrapEnsemble:
    trees: tuple[Tree, ...]
    b: int
    seed: int

    def __post_init__(self) -> None:
        if len(self.trees) != self.b:
            raise EnsembleFitError(f"expected {self.b} trees, got {len(self.trees)}")


@dataclass(frozen=True)
class CIRecord:
    """Per-sample interval: ensemble mean plus empirical quantile bounds."""

    sample_id: str
    point: float
    lower: float
    upper: float
    width: float

    def __post_init__(self) -> None:
        if self.upper < self.lower:
            raise ValueError(f"sample {self.sample_id}: upper < lower")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "width": self.width,
        }


@dataclass(frozen=True)
class StabilityReport:
    records: tuple[CIRecord, ...]
    threshold: float
    stable_ids: frozenset[str]
    unstable_ids: frozenset[str]

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in sorted(self.records, key=lambda r: r.sample_id)],
            "threshold": self.threshold,
            "stable_ids": sorted(self.stable_ids),
            "unstable_ids": sorted(self.unstable_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def bag(ids: Iterable[str], b: int, seed: int) -> list[list[str]]:
    """Draw ``b`` bootstrap multisets (with replacement, same size as input).

    Each replicate uses a sub-seed derived from ``(seed, index)``, so any
    replicate can be reproduced independently of the others.
    """
    pool = sorted(str(i) for i in ids)
    if not pool:
        raise ValueError("cannot bag an empty id set")
    if b < 1:
        raise ValueError("b must be >= 1")
    n = len(pool)
    bags = []
    for r in range(b):
        rng = rng_for(seed, "bag", r)
        draw = rng.integers(0, n, size=n)
        bags.append([pool[i] for i in draw])
    return bags


def fit_ensemble(
    ds: Dataset,
    bags: Sequence[Sequence[str]],
    covariates: Sequence[str],
    params: TreeParams,
    seed: int = 0,
    redraw_pool: Sequence[str] | None = None,
    parallelism: int = 1,
) -> BootstrapEnsemble:
    """Fit one tree per bag, with per-index sub-seeding.

    A bag that violates the tree fit preconditions (an arm too small after
    resampling) is redrawn from ``redraw_pool``: by default the distinct
    ids across all bags: up to 5 times before the ensemble fails. Results
    are identical for any ``parallelism``.
    """
    if redraw_pool is None:
        pool = sorted({i for bag_ids in bags for i in bag_ids})
    else:
        pool = sorted(set(redraw_pool))

    def fit_one(index: int) -> Tree:
        bag_ids = list(bags[index])
        for attempt in range(_MAX_REDRAWS + 1):
            tree_params = replace(params, seed=derive_seed(seed, "tree", index, attempt))
            try:
                return fit_tree(ds, bag_ids, covariates, tree_params, tree_id=f"bag-{index:03d}")
            except TreeFitError:
                if attempt == _MAX_REDRAWS:
                    raise
                rng = rng_for(seed, "redraw", index, attempt)
                draw = rng.integers(0, len(pool), size=len(pool))
                bag_ids = [pool[i] for i in draw]
        raise AssertionError("unreachable")

    indices = range(len(bags))
    try:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool_exec:
                trees = list(pool_exec.map(fit_one, indices))
        else:
            trees = [fit_one(i) for i in indices]
    except TreeFitError as exc:
        raise EnsembleFitError(f"bag unfittable after {_MAX_REDRAWS} redraws: {exc}") from exc
    return BootstrapEnsemble(trees=tuple(trees), b=len(bags), seed=seed)


def quantile(values: Sequence[float], p: float) -> float:
    """Order statistic with linear interpolation at rank (n-1)*p + 1."""
    if len(values) == 0:
        raise ValueError("quantile of an empty list")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    s = sorted(float(v) for v in values)
    n = len(s)
    if n == 1:
        return s[0]
    h = (n - 1) * p
    lo = int(np.floor(h))
    if lo >= n - 1:
        return s[-1]
    frac = h - lo
    return s[lo] + frac * (s[lo + 1] - s[lo])


def predict_ci(
    ens: BootstrapEnsemble,
    ds: Dataset,
    test_ids: Iterable[str],
    alpha: float = DEFAULT_ALPHA,
) -> list[CIRecord]:
    """Percentile interval of the ensemble's predictions for each test sample."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    records = []
    for sid in sorted(str(i) for i in set(test_ids)):
        x = ds.sample(sid).covariates
        preds = [assign_leaf(tree, x).cate for tree in ens.trees]
        point = float(np.mean(preds))
        lower = quantile(preds, alpha / 2.0)
        upper = quantile(preds, 1.0 - alpha / 2.0)
        records.append(CIRecord(sid, point, lower, upper, upper - lower))
    return records


def stability_filter(records: Sequence[CIRecord]) -> StabilityReport:
    """Split records at the mean interval width; strictly-above is unstable."""
    if not records:
        raise ValueError("stability filter needs at least one record")
    threshold = float(np.mean([r.width for r in records]))
    unstable = frozenset(r.sample_id for r in records if r.width > threshold)
    stable = frozenset(r.sample_id for r in records) - unstable
    return StabilityReport(
        records=tuple(records),
        threshold=threshold,
        stable_ids=stable,
        unstable_ids=unstable,
    )


def save_report(report: StabilityReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")
