"""Synthetic observational data with known confounding and ground truth.

Binary comorbidity-style flags are drawn independently; treatment follows a
logistic model shifted by the configured confounders; the outcome adds each
confounder's shift, the treatment effect, and Gaussian noise:

    logit P(W=1 | x) = logit(base_rate) + sum_c flag_c(x) * treat_shift_c
    Y = sum_c flag_c(x) * outcome_shift_c + W * tau(x) + Normal(0, noise_sd)

tau(x) is piecewise constant: the first matching piece wins, otherwise the
default effect applies.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .causal_tree import MissingCovariateError
from .dataset import CovariateMeta, Dataset, Sample
from .seeding import rng_for

COMORBIDITY_NAMES = ("HTN", "DM", "CHF", "AF", "CAD", "CVAD", "CKD", "COPDA", "GOUT")

_DESCRIPTIONS = {
    "HTN": "hypertension diagnosis on record",
    "DM": "diabetes mellitus diagnosis on record",
    "CHF": "congestive heart failure diagnosis on record",
    "AF": "atrial fibrillation diagnosis on record",
    "CAD": "coronary artery disease diagnosis on record",
    "CVAD": "cerebrovascular accident or disease history",
    "CKD": "chronic kidney disease diagnosis on record",
    "COPDA": "chronic obstructive pulmonary disease or asthma",
    "GOUT": "gout diagnosis on record",
}


class SynthError(ValueError):
    """Invalid generator configuration or degenerate draw."""


@dataclass(frozen=True)
class ConfounderSpec:
    treatment_log_odds_shift: float
    outcome_shift: float


@dataclass(frozen=True)
class EffectPiece:
    """One constant-effect region: applies when all `when` levels match."""

    when: Mapping[str, str]
    effect: float


@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    covariates: tuple[CovariateMeta, ...] = ()
    confounders: Mapping[str, ConfounderSpec] = field(default_factory=dict)
    effect_pieces: tuple[EffectPiece, ...] = ()
    default_effect: float = 0.0
    noise_sd: float = 1.0
    base_rate_treated: float = 0.5
    prevalence: Mapping[str, float] = field(default_factory=dict)
    continuous_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.covariates:
            object.__setattr__(self, "covariates", default_covariates())
        names = {m.name for m in self.covariates}
        if self.n < 1:
            raise SynthError("n must be >= 1")
        if self.noise_sd < 0:
            raise SynthError("noise_sd must be >= 0")
        if not 0.0 < self.base_rate_treated < 1.0:
            raise SynthError("base_rate_treated must be in (0, 1)")
        unknown = set(self.confounders) - names
        if unknown:
            raise SynthError(f"confounder {sorted(unknown)[0]} is not a covariate")
        for piece in self.effect_pieces:
            unknown = set(piece.when) - names
            if unknown:
                raise SynthError(f"effect piece references unknown covariate {sorted(unknown)[0]}")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "covariates": [
                {"name": m.name, "description": m.description, "kind": m.kind, "levels": list(m.levels)}
                for m in self.covariates
            ],
            "confounders": {
                name: {"treatment_log_odds_shift": c.treatment_log_odds_shift, "outcome_shift": c.outcome_shift}
                for name, c in sorted(self.confounders.items())
            },
            "effect_pieces": [{"when": dict(p.when), "effect": p.effect} for p in self.effect_pieces],
            "default_effect": self.default_effect,
            "noise_sd": self.noise_sd,
            "base_rate_treated": self.base_rate_treated,
            "prevalence": dict(sorted(self.prevalence.items())),
            "continuous_ranges": {k: list(v) for k, v in sorted(self.continuous_ranges.items())},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        covariates = tuple(
            CovariateMeta(
                name=str(m["name"]),
                description=str(m.get("description", "")),
                kind=str(m["kind"]),
                levels=tuple(m.get("levels", ())),
            )
            for m in d.get("covariates", ())
        )
        confounders = {
            str(name): ConfounderSpec(
                treatment_log_odds_shift=float(spec["treatment_log_odds_shift"]),
                outcome_shift=float(spec["outcome_shift"]),
            )
            for name, spec in d.get("confounders", {}).items()
        }
        pieces = tuple(
            EffectPiece(when={str(k): str(v) for k, v in p["when"].items()}, effect=float(p["effect"]))
            for p in d.get("effect_pieces", ())
        )
        return cls(
            n=int(d.get("n", 2000)),
            covariates=covariates,
            confounders=confounders,
            effect_pieces=pieces,
            default_effect=float(d.get("default_effect", 0.0)),
            noise_sd=float(d.get("noise_sd", 1.0)),
            base_rate_treated=float(d.get("base_rate_treated", 0.5)),
            prevalence={str(k): float(v) for k, v in d.get("prevalence", {}).items()},
            continuous_ranges={str(k): (float(v[0]), float(v[1])) for k, v in d.get("continuous_ranges", {}).items()},
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class GroundTruth:
    tau: Mapping[str, float]
    true_ate: float
    confounder_biases: Mapping[str, ConfounderSpec]

    def to_dict(self) -> dict:
        return {
            "tau": {k: self.tau[k] for k in sorted(self.tau)},
            "true_ate": self.true_ate,
            "confounder_biases": {
                name: {"treatment_log_odds_shift": c.treatment_log_odds_shift, "outcome_shift": c.outcome_shift}
                for name, c in sorted(self.confounder_biases.items())
            },
        }


def default_covariates(names: Sequence[str] = COMORBIDITY_NAMES) -> tuple[CovariateMeta, ...]:
    """Binary comorbidity flags with clinical descriptions."""
    return tuple(
        CovariateMeta(name=n, description=_DESCRIPTIONS.get(n, n), kind="binary", levels=("0", "1"))
        for n in names
    )


def effect_at(cfg: SynthConfig, covariates: Mapping[str, object]) -> float:
    for piece in cfg.effect_pieces:
        if all(str(covariates[c]) == level for c, level in piece.when.items()):
            return piece.effect
    return cfg.default_effect


def generate(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset under the config; deterministic per seed."""
    rng = rng_for(cfg.seed, "synth")
    n = cfg.n
    columns: dict[str, np.ndarray] = {}
    for m in cfg.covariates:
        if m.kind == "continuous":
            lo, hi = cfg.continuous_ranges.get(m.name, (0.0, 1.0))
            columns[m.name] = rng.uniform(lo, hi, size=n)
        elif m.kind == "binary":
            p = cfg.prevalence.get(m.name, 0.5)
            columns[m.name] = np.where(rng.random(n) < p, m.levels[1], m.levels[0])
        else:
            columns[m.name] = rng.choice(np.array(m.levels, dtype=object), size=n)

    log_odds = np.full(n, _logit(cfg.base_rate_treated))
    for name, spec in cfg.confounders.items():
        flag = _flag(columns[name], cfg, name)
        log_odds = log_odds + flag * spec.treatment_log_odds_shift
    w = (rng.random(n) < _sigmoid(log_odds)).astype(int)
    if w.all() or not w.any():
        raise SynthError("degenerate draw: a treatment arm is empty; re-seed or soften the shifts")

    width = len(str(n - 1))
    samples = []
    tau_by_id: dict[str, float] = {}
    noise = rng.normal(0.0, cfg.noise_sd, size=n) if cfg.noise_sd > 0 else np.zeros(n)
    for i in range(n):
        covs = {m.name: (float(columns[m.name][i]) if m.kind == "continuous" else str(columns[m.name][i]))
                for m in cfg.covariates}
        tau = effect_at(cfg, covs)
        baseline = sum(
            _flag_scalar(covs[name], cfg, name) * spec.outcome_shift
            for name, spec in cfg.confounders.items()
        )
        y = baseline + w[i] * tau + noise[i]
        sid = f"s{i:0{width}d}"
        samples.append(Sample(sid, float(y), int(w[i]), covs))
        tau_by_id[sid] = float(tau)

    truth = GroundTruth(
        tau=tau_by_id,
        true_ate=float(np.mean(list(tau_by_id.values()))),
        confounder_biases=dict(cfg.confounders),
    )
    return Dataset(list(cfg.covariates), samples), truth


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _flag(column: np.ndarray, cfg: SynthConfig, name: str) -> np.ndarray:
    meta = next(m for m in cfg.covariates if m.name == name)
    if meta.kind == "continuous":
        raise SynthError(f"confounder {name} must be binary or categorical")
    positive = meta.levels[1] if meta.kind == "binary" else meta.levels[-1]
    return (column == positive).astype(float)


def _flag_scalar(value: object, cfg: SynthConfig, name: str) -> float:
    meta = next(m for m in cfg.covariates if m.name == name)
    positive = meta.levels[1] if meta.kind == "binary" else meta.levels[-1]
    return 1.0 if str(value) == positive else 0.0


def write_fixture(ds: Dataset, truth: GroundTruth, out_dir: str | Path) -> dict[str, Path]:
    """Emit the CSV + metadata consumed by the loader, plus the ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "data.csv"
    meta_path = out / "metadata.json"
    truth_path = out / "ground_truth.json"

    names = ds.covariate_names
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y", "w", *names])
        for s in ds.samples:
            writer.writerow([s.id, repr(s.outcome), s.treatment, *[s.covariates[c] for c in names]])

    meta_path.write_text(
        json.dumps(
            [
                {"name": m.name, "description": m.description, "kind": m.kind, "levels": list(m.levels)}
                for m in ds.meta
            ],
            indent=2,
        ),
        encoding="utf-8",
    )
    truth_path.write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=2), encoding="utf-8")
    return {"data": data_path, "metadata": meta_path, "ground_truth": truth_path}


def evaluate_model(model, ds: Dataset, truth: GroundTruth) -> dict[str, float]:
    """Root-mean-square error of predicted vs true per-sample effects, plus ATE error.

    Evaluation runs over the model's held-out test ids (all samples when the
    model carries none).
    """
    from .orchestrator import predict_final  # local import to avoid a cycle

    ids = list(getattr(model, "test_ids", ()) or ds.ids())
    preds = []
    errors = []
    for sid in ids:
        x = ds.sample(sid).covariates
        try:
            result = predict_final(model, x)
        except MissingCovariateError:
            raise
        preds.append(result["cate"])
        errors.append((result["cate"] - truth.tau[sid]) ** 2)
    pehe = float(np.sqrt(np.mean(errors)))
    ate_error = float(abs(np.mean(preds) - truth.true_ate))
    return {"pehe": pehe, "ate_error": ate_error}
