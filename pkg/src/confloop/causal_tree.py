"""Honest causal trees over mixed covariates.

Trees are grown greedily on the gain in squared subgroup effect,
normalized per sample at the node:

    gain = (n_left * tau_left^2 + n_right * tau_right^2 - n * tau^2) / n

where ``tau`` is the treated-minus-control mean outcome difference. The
unnormalized form is scale-dependent in n, which would make any fixed
``min_split_gain`` meaningless across node sizes.

With ``honest=True`` the samples are halved (stratified by arm, under the
tree seed) into a split half that chooses the structure and an estimate
half that supplies every leaf's effect and arm counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import CovariateMeta, Dataset
from .seeding import derive_seed, rng_for


class TreeFitError(ValueError):
    """Fit refused: preconditions not met."""


class MissingCovariateError(KeyError):
    """A covariate the tree splits on is absent from the input map."""


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 4
    min_leaf_per_arm: int = 15
    min_split_gain: float = 1e-4
    honest: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise TreeFitError("max_depth must be >= 1")
        if self.min_leaf_per_arm < 1:
            raise TreeFitError("min_leaf_per_arm must be >= 1")
        if self.min_split_gain < 0:
            raise TreeFitError("min_split_gain must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_leaf_per_arm": self.min_leaf_per_arm,
            "min_split_gain": self.min_split_gain,
            "honest": self.honest,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeParams":
        return cls(**{k: d[k] for k in ("max_depth", "min_leaf_per_arm", "min_split_gain", "honest", "seed") if k in d})


@dataclass(frozen=True)
class SplitRule:
    """One edge predicate on a covariate.

    ``op`` is ``<=``/``>`` for continuous covariates and ``==``/``!=`` for
    binary or categorical ones. For binary covariates the negative branch is
    normalized to ``== other_level`` so rule text stays readable.
    """

    covariate: str
    op: str
    value: float | str

    def matches(self, x: Mapping[str, object]) -> bool:
        try:
            raw = x[self.covariate]
        except KeyError:
            raise MissingCovariateError(self.covariate) from None
        if self.op == "<=":
            return float(raw) <= float(self.value)  # type: ignore[arg-type]
        if self.op == ">":
            return float(raw) > float(self.value)  # type: ignore[arg-type]
        if self.op == "==":
            return str(raw) == str(self.value)
        if self.op == "!=":
            return str(raw) != str(self.value)
        raise ValueError(f"unknown op {self.op!r}")

    def __str__(self) -> str:
        value = f"{self.value:g}" if isinstance(self.value, float) else self.value
        return f"{self.covariate} {self.op} {value}"

    def to_dict(self) -> dict:
        return {"covariate": self.covariate, "op": self.op, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitRule":
        return cls(str(d["covariate"]), str(d["op"]), d["value"])


@dataclass(frozen=True)
class Leaf:
    """Terminal subgroup: rule path, effect estimate, and arm counts."""

    id: int
    path: tuple[SplitRule, ...]
    cate: float
    n_treated: int
    n_control: int

    def matches(self, x: Mapping[str, object]) -> bool:
        return all(rule.matches(x) for rule in self.path)


@dataclass(frozen=True)
class Partition:
    """A fitted tree's leaves: mutually exclusive, jointly exhaustive."""

    leaves: tuple[Leaf, ...]
    tree_id: str
    fit_params: TreeParams


@dataclass(frozen=True)
class Rule:
    """Human-readable form of one leaf, ready for agent prompting.

    ``narrative`` is filled by the agent's explain stage; rule extraction
    itself never calls a model.
    """

    leaf_id: int
    conjunction: tuple[SplitRule, ...]
    cate: float
    n_treated: int
    n_control: int
    text: str
    covariate_descriptions: Mapping[str, str]
    narrative: str = ""

    def with_narrative(self, narrative: str) -> "Rule":
        return replace(self, narrative=narrative)


@dataclass
class _Node:
    rule: SplitRule | None = None      # predicate of the left branch
    neg_rule: SplitRule | None = None  # predicate of the right branch
    left: "_Node | None" = None
    right: "_Node | None" = None
    leaf: Leaf | None = None


@dataclass
class Tree:
    """Fitted causal tree plus the sample halves that produced it."""

    tree_id: str
    params: TreeParams
    covariates: tuple[str, ...]
    root: _Node
    leaves: tuple[Leaf, ...]
    split_ids: tuple[str, ...]
    est_ids: tuple[str, ...]

    def partition(self) -> Partition:
        return Partition(self.leaves, self.tree_id, self.params)


def leaf_cate(treated_outcomes: Sequence[float], control_outcomes: Sequence[float]) -> float:
    """Difference of arm mean outcomes; both arms must be non-empty."""
    if len(treated_outcomes) == 0 or len(control_outcomes) == 0:
        raise TreeFitError("leaf effect requires both treatment arms to be non-empty")
    return float(np.mean(treated_outcomes) - np.mean(control_outcomes))


def _value_sort_key(value: object) -> tuple:
    try:
        return (0, float(value), "")  # type: ignore[arg-type]
    except (TypeError, ValueError):
        return (1, 0.0, str(value))


def _tau(y: np.ndarray, w: np.ndarray) -> float:
    return float(y[w == 1].mean() - y[w == 0].mean())


def _arm_counts(w: np.ndarray) -> tuple[int, int]:
    n_t = int((w == 1).sum())
    return n_t, int(w.size - n_t)


def candidate_splits(meta: CovariateMeta, values: np.ndarray) -> list[tuple[SplitRule, SplitRule]]:
    """Enumerate (left, right) rule pairs for one covariate at a node.

    Continuous: midpoints between consecutive distinct observed values.
    Binary/categorical: one-vs-rest per level, in ascending value order.
    """
    pairs: list[tuple[SplitRule, SplitRule]] = []
    if meta.kind == "continuous":
        distinct = np.unique(values.astype(float))
        for lo, hi in zip(distinct[:-1], distinct[1:]):
            thr = float((lo + hi) / 2.0)
            pairs.append((SplitRule(meta.name, "<=", thr), SplitRule(meta.name, ">", thr)))
    else:
        levels = sorted(meta.levels, key=_value_sort_key)
        for level in levels:
            if meta.kind == "binary":
                other = next(v for v in meta.levels if v != level)
                neg = SplitRule(meta.name, "==", other)
            else:
                neg = SplitRule(meta.name, "!=", level)
            pairs.append((SplitRule(meta.name, "==", level), neg))
    return pairs


def fit_tree(
    ds: Dataset,
    ids: Sequence[str],
    covariates: Sequence[str],
    params: TreeParams,
    tree_id: str | None = None,
) -> Tree:
    """Grow a causal tree on the given samples (repeats allowed, as in bags).

    A split is accepted only when its normalized gain exceeds
    ``min_split_gain`` and each child keeps at least ``min_leaf_per_arm``
    samples per arm in the split half and, when honest, in the estimate half
    as well. Ties are broken by covariate order, then ascending value.
    """
    if not covariates:
        raise TreeFitError("covariate list is empty")
    ids = [str(i) for i in ids]
    if not ids:
        raise TreeFitError("no samples to fit on")
    rows = ds.row_indices(ids)
    y = ds.outcomes()[rows]
    w = ds.treatments()[rows]
    n_t, n_c = _arm_counts(w)
    need = 2 * params.min_leaf_per_arm
    if n_t < need or n_c < need:
        raise TreeFitError(
            f"need >= {need} samples per arm, got treated={n_t}, control={n_c}"
        )
    cols = {name: ds.column(name)[rows] for name in covariates}
    metas = {name: ds.meta_for(name) for name in covariates}

    n = len(ids)
    if params.honest:
        rng = rng_for(params.seed, "honest-half")
        split_sel: list[int] = []
        est_sel: list[int] = []
        for arm in (1, 0):
            arm_idx = np.flatnonzero(w == arm)
            arm_idx = arm_idx[rng.permutation(arm_idx.size)]
            half = arm_idx.size // 2
            split_sel.extend(arm_idx[:half].tolist())
            est_sel.extend(arm_idx[half:].tolist())
        split_idx = np.array(sorted(split_sel), dtype=int)
        est_idx = np.array(sorted(est_sel), dtype=int)
    else:
        split_idx = est_idx = np.arange(n)

    leaves: list[Leaf] = []

    def make_leaf(sel: np.ndarray, path: tuple[SplitRule, ...]) -> Leaf:
        w_e = w[sel]
        y_e = y[sel]
        cate = leaf_cate(y_e[w_e == 1], y_e[w_e == 0])
        n_te, n_ce = _arm_counts(w_e)
        leaf = Leaf(id=len(leaves), path=path, cate=cate, n_treated=n_te, n_control=n_ce)
        leaves.append(leaf)
        return leaf

    min_arm = params.min_leaf_per_arm

    def feasible(w_side: np.ndarray) -> bool:
        n_t_side, n_c_side = _arm_counts(w_side)
        return n_t_side >= min_arm and n_c_side >= min_arm

    def best_split(s_sel: np.ndarray, e_sel: np.ndarray):
        # Candidates are enumerated in tie-break order (covariate order,
        # then ascending value), so a strict improvement test keeps the
        # first of any gain tie.
        y_s, w_s = y[s_sel], w[s_sel]
        w_e = w[e_sel]
        n_node = s_sel.size
        tau_parent = _tau(y_s, w_s)
        best = None  # (gain, rule, neg_rule, split_mask, est_mask)
        for name in covariates:
            col_s = cols[name][s_sel]
            col_e = cols[name][e_sel]
            for rule, neg in candidate_splits(metas[name], col_s):
                if metas[name].kind == "continuous":
                    mask_s = col_s.astype(float) <= float(rule.value)
                    mask_e = col_e.astype(float) <= float(rule.value)
                else:
                    mask_s = col_s == rule.value
                    mask_e = col_e == rule.value
                if not (feasible(w_s[mask_s]) and feasible(w_s[~mask_s])):
                    continue
                if params.honest and not (feasible(w_e[mask_e]) and feasible(w_e[~mask_e])):
                    continue
                tau_l = _tau(y_s[mask_s], w_s[mask_s])
                tau_r = _tau(y_s[~mask_s], w_s[~mask_s])
                n_l = int(mask_s.sum())
                n_r = n_node - n_l
                gain = (n_l * tau_l**2 + n_r * tau_r**2 - n_node * tau_parent**2) / n_node
                if best is None or gain > best[0]:
                    best = (gain, rule, neg, mask_s, mask_e)
        return best

    def build(s_sel: np.ndarray, e_sel: np.ndarray, depth: int, path: tuple[SplitRule, ...]) -> _Node:
        if depth < params.max_depth:
            found = best_split(s_sel, e_sel)
            if found is not None and found[0] > params.min_split_gain:
                _, rule, neg, mask_s, mask_e = found
                left = build(s_sel[mask_s], e_sel[mask_e], depth + 1, path + (rule,))
                right = build(s_sel[~mask_s], e_sel[~mask_e], depth + 1, path + (neg,))
                return _Node(rule=rule, neg_rule=neg, left=left, right=right)
        return _Node(leaf=make_leaf(e_sel, path))

    root = build(split_idx, est_idx, 0, ())
    if tree_id is None:
        tree_id = f"tree-{derive_seed(params.seed, 'id', len(ids)) % 10**8:08d}"
    return Tree(
        tree_id=tree_id,
        params=params,
        covariates=tuple(covariates),
        root=root,
        leaves=tuple(leaves),
        split_ids=tuple(sorted(ids[i] for i in split_idx)),
        est_ids=tuple(sorted(ids[i] for i in est_idx)),
    )


def assign_leaf(tree: Tree, x: Mapping[str, object]) -> Leaf:
    """Route a covariate map to the unique leaf whose path it satisfies."""
    node = tree.root
    while node.leaf is None:
        assert node.rule is not None and node.left is not None and node.right is not None
        node = node.left if node.rule.matches(x) else node.right
    return node.leaf


def extract_rules(p: Partition, meta: Sequence[CovariateMeta]) -> list[Rule]:
    """Serialize each leaf as a symbolic conjunction with its effect and counts."""
    if not p.leaves:
        raise TreeFitError("partition has no leaves")
    descriptions = {m.name: m.description for m in meta}
    rules = []
    for leaf in p.leaves:
        if leaf.path:
            text = " AND ".join(str(r) for r in leaf.path)
        else:
            text = "(entire population)"
        used = {r.covariate for r in leaf.path}
        rules.append(
            Rule(
                leaf_id=leaf.id,
                conjunction=leaf.path,
                cate=leaf.cate,
                n_treated=leaf.n_treated,
                n_control=leaf.n_control,
                text=text,
                covariate_descriptions={c: descriptions.get(c, "") for c in sorted(used)},
            )
        )
    return rules


def _node_to_dict(node: _Node) -> dict:
    if node.leaf is not None:
        leaf = node.leaf
        return {
            "kind": "leaf",
            "id": leaf.id,
            "cate": leaf.cate,
            "n_treated": leaf.n_treated,
            "n_control": leaf.n_control,
        }
    assert node.rule is not None and node.neg_rule is not None
    return {
        "kind": "split",
        "rule": node.rule.to_dict(),
        "neg_rule": node.neg_rule.to_dict(),
        "left": _node_to_dict(node.left),   # type: ignore[arg-type]
        "right": _node_to_dict(node.right),  # type: ignore[arg-type]
    }


def tree_to_dict(tree: Tree) -> dict:
    return {
        "tree_id": tree.tree_id,
        "params": tree.params.to_dict(),
        "covariates": list(tree.covariates),
        "split_ids": list(tree.split_ids),
        "est_ids": list(tree.est_ids),
        "root": _node_to_dict(tree.root),
    }


def tree_from_dict(d: Mapping) -> Tree:
    leaves: list[Leaf] = []

    def walk(nd: Mapping, path: tuple[SplitRule, ...]) -> _Node:
        if nd["kind"] == "leaf":
            leaf = Leaf(
                id=int(nd["id"]),
                path=path,
                cate=float(nd["cate"]),
                n_treated=int(nd["n_treated"]),
                n_control=int(nd["n_control"]),
            )
            leaves.append(leaf)
            return _Node(leaf=leaf)
        rule = SplitRule.from_dict(nd["rule"])
        neg = SplitRule.from_dict(nd["neg_rule"])
        left = walk(nd["left"], path + (rule,))
        right = walk(nd["right"], path + (neg,))
        return _Node(rule=rule, neg_rule=neg, left=left, right=right)

    root = walk(d["root"], ())
    leaves.sort(key=lambda l: l.id)
    return Tree(
        tree_id=str(d["tree_id"]),
        params=TreeParams.from_dict(d["params"]),
        covariates=tuple(d["covariates"]),
        root=root,
        leaves=tuple(leaves),
        split_ids=tuple(d["split_ids"]),
        est_ids=tuple(d["est_ids"]),
    )


def save_tree(tree: Tree, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tree_to_dict(tree), sort_keys=True, indent=2), encoding="utf-8")


def load_tree(path: str | Path) -> Tree:
    return tree_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
