"""Observational dataset loading, validation, splitting, and restriction.

A dataset couples per-sample records (outcome, binary treatment, covariates)
with covariate metadata whose free-text descriptions later flow verbatim
into agent prompts. Binary and categorical covariate values are canonicalized
to strings; continuous values to floats.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .seeding import rng_for

log = logging.getLogger(__name__)

KINDS = ("binary", "categorical", "continuous")

DEFAULT_MIN_STRATUM_SIZE = 30


class DatasetError(ValueError):
    """Invalid data or metadata."""


class RestrictionError(DatasetError):
    """Restriction requested on an unsupported covariate."""


@dataclass(frozen=True)
class CovariateMeta:
    """Schema entry for one covariate.

    ``description`` is free text and is injected verbatim into agent
    prompts. ``levels`` lists the admissible values for binary/categorical
    kinds (compared as strings) and is empty for continuous covariates.
    """

    name: str
    description: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DatasetError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == "binary" and len(self.levels) != 2:
            raise DatasetError(f"covariate {self.name!r}: binary kind requires exactly two levels")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise DatasetError(f"covariate {self.name!r}: categorical kind requires >= 2 levels")
        if self.kind == "continuous" and self.levels:
            raise DatasetError(f"covariate {self.name!r}: continuous kind takes no levels")
        if len(set(self.levels)) != len(self.levels):
            raise DatasetError(f"covariate {self.name!r}: duplicate levels")


@dataclass(frozen=True)
class Sample:
    """One observational record: outcome, treatment arm, covariate values."""

    id: str
    outcome: float
    treatment: int
    covariates: Mapping[str, float | str]


def canonical_value(meta: CovariateMeta, raw: object) -> float | str:
    """Coerce a raw covariate value to its canonical form, or raise."""
    if meta.kind == "continuous":
        try:
            return float(raw)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            raise DatasetError(f"covariate {meta.name!r}: {raw!r} is not numeric") from None
    value = str(raw).strip()
    if value not in meta.levels:
        raise DatasetError(
            f"covariate {meta.name!r}: value {value!r} not in levels {list(meta.levels)}"
        )
    return value


class Dataset:
    """Immutable collection of samples plus covariate metadata.

    Construction validates the invariants (unique ids, covariate maps that
    exactly match the metadata, values conforming to kind/levels) and caches
    column arrays for the tree and bootstrap code.
    """

    def __init__(self, meta: Sequence[CovariateMeta], samples: Sequence[Sample]):
        names = [m.name for m in meta]
        if len(set(names)) != len(names):
            raise DatasetError("duplicate covariate names in metadata")
        self.meta: tuple[CovariateMeta, ...] = tuple(meta)
        self._meta_by_name = {m.name: m for m in self.meta}
        expected = set(names)

        seen: set[str] = set()
        canon: list[Sample] = []
        for s in samples:
            if s.id in seen:
                raise DatasetError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if set(s.covariates) != expected:
                missing = expected - set(s.covariates)
                extra = set(s.covariates) - expected
                raise DatasetError(
                    f"sample {s.id!r}: covariates do not match metadata"
                    f" (missing={sorted(missing)}, unknown={sorted(extra)})"
                )
            if int(s.treatment) not in (0, 1):
                raise DatasetError(f"sample {s.id!r}: treatment must be 0 or 1, got {s.treatment!r}")
            values = {
                name: canonical_value(self._meta_by_name[name], value)
                for name, value in s.covariates.items()
            }
            canon.append(Sample(str(s.id), float(s.outcome), int(s.treatment), values))
        self.samples: tuple[Sample, ...] = tuple(canon)

        self._row_of = {s.id: i for i, s in enumerate(self.samples)}
        self._y = np.array([s.outcome for s in self.samples], dtype=float)
        self._w = np.array([s.treatment for s in self.samples], dtype=int)
        self._cols: dict[str, np.ndarray] = {}
        for m in self.meta:
            if m.kind == "continuous":
                col = np.array([s.covariates[m.name] for s in self.samples], dtype=float)
            else:
                col = np.array([s.covariates[m.name] for s in self.samples], dtype=object)
            self._cols[m.name] = col

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def covariate_names(self) -> list[str]:
        return [m.name for m in self.meta]

    def meta_for(self, name: str) -> CovariateMeta:
        try:
            return self._meta_by_name[name]
        except KeyError:
            raise DatasetError(f"unknown covariate {name}") from None

    def sample(self, sample_id: str) -> Sample:
        return self.samples[self._row_of[sample_id]]

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def row_indices(self, ids: Iterable[str]) -> np.ndarray:
        """Row index array for the given ids; repeats are preserved."""
        return np.array([self._row_of[i] for i in ids], dtype=int)

    def outcomes(self) -> np.ndarray:
        return self._y

    def treatments(self) -> np.ndarray:
        return self._w

    def column(self, name: str) -> np.ndarray:
        return self._cols[name]


@dataclass(frozen=True)
class DataSplit:
    """Disjoint train / estimation / test id sets covering the dataset."""

    train: frozenset[str]
    estimation: frozenset[str]
    test: frozenset[str]

    def to_dict(self) -> dict:
        return {
            "train": sorted(self.train),
            "estimation": sorted(self.estimation),
            "test": sorted(self.test),
        }


@dataclass(frozen=True)
class RestrictionContext:
    """Confounder list plus (optionally) the level assignment of one stratum.

    ``stratum`` is empty when the context only names the confounders to
    stratify on; per-stratum contexts produced by :func:`apply_restriction`
    carry the level of every confounder.
    """

    confounders: tuple[str, ...]
    stratum: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "confounders", tuple(self.confounders))
        object.__setattr__(self, "stratum", dict(self.stratum))
        if self.stratum and set(self.stratum) != set(self.confounders):
            raise DatasetError("stratum keys must equal the confounder list")

    def with_stratum(self, levels: Mapping[str, str]) -> "RestrictionContext":
        return RestrictionContext(self.confounders, dict(levels))

    def matches(self, covariates: Mapping[str, object]) -> bool:
        """True when the covariate map carries this stratum's exact levels."""
        return all(str(covariates[c]) == self.stratum[c] for c in self.confounders)

    def key(self) -> str:
        return stratum_key(self.confounders, self.stratum)

    def to_dict(self) -> dict:
        return {
            "confounders": list(self.confounders),
            "stratum": {c: self.stratum[c] for c in self.confounders} if self.stratum else {},
        }


def stratum_key(confounders: Sequence[str], levels: Mapping[str, str]) -> str:
    """Canonical stratum label, e.g. ``"HTN=1|DM=0"`` (empty for no confounders)."""
    return "|".join(f"{c}={levels[c]}" for c in confounders)


def load_metadata(meta_path: str | Path) -> list[CovariateMeta]:
    """Parse the covariate metadata file (JSON array of objects)."""
    try:
        entries = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"metadata {meta_path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise DatasetError(f"metadata {meta_path}: expected a JSON array")
    meta = []
    for i, entry in enumerate(entries):
        try:
            meta.append(
                CovariateMeta(
                    name=str(entry["name"]),
                    description=str(entry.get("description", "")),
                    kind=str(entry["kind"]),
                    levels=tuple(entry.get("levels", ())),
                )
            )
        except KeyError as exc:
            raise DatasetError(f"metadata entry {i}: missing field {exc}") from None
    return meta


def load_dataset(data_path: str | Path, meta_path: str | Path) -> Dataset:
    """Load and validate a dataset from a CSV file and its metadata file.

    The CSV must carry a header with ``id``, ``y``, ``w`` and one column per
    covariate named in the metadata. Errors are reported with the offending
    row number (header is row 1).
    """
    meta = load_metadata(meta_path)
    by_name = {m.name: m for m in meta}
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{data_path}: empty file") from None
        header = [h.strip() for h in header]
        for required in ("id", "y", "w"):
            if required not in header:
                raise DatasetError(f"{data_path}: missing required column {required!r}")
        cov_cols = [h for h in header if h not in ("id", "y", "w")]
        unknown = [c for c in cov_cols if c not in by_name]
        if unknown:
            raise DatasetError(f"{data_path}: unknown covariate {unknown[0]}")
        missing = [m.name for m in meta if m.name not in cov_cols]
        if missing:
            raise DatasetError(f"{data_path}: missing covariate column {missing[0]}")

        idx = {name: header.index(name) for name in header}
        samples = []
        row_of_id: dict[str, int] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{data_path} row {rownum}: expected {len(header)} cells, got {len(row)}")
            try:
                outcome = float(row[idx["y"]])
            except ValueError:
                raise DatasetError(f"{data_path} row {rownum}: y={row[idx['y']]!r} is not numeric") from None
            w_raw = row[idx["w"]].strip()
            if w_raw not in ("0", "1"):
                raise DatasetError(f"{data_path} row {rownum}: w={w_raw!r} is not in {{0,1}}")
            covs = {}
            for name in cov_cols:
                try:
                    covs[name] = canonical_value(by_name[name], row[idx[name]])
                except DatasetError as exc:
                    raise DatasetError(f"{data_path} row {rownum}: {exc}") from None
            sid = row[idx["id"]].strip()
            if sid in row_of_id:
                raise DatasetError(
                    f"{data_path} row {rownum}: duplicate id {sid!r} (first seen on row {row_of_id[sid]})"
                )
            row_of_id[sid] = rownum
            samples.append(Sample(sid, outcome, int(w_raw), covs))
    try:
        return Dataset(meta, samples)
    except DatasetError as exc:
        raise DatasetError(f"{data_path}: {exc}") from None


def split_dataset(ds: Dataset, ratios: Sequence[float], seed: int) -> DataSplit:
    """Deterministic shuffled train/estimation/test partition.

    Sizes are floor-rounded from the ratios with the remainder assigned to
    test. A split whose ratio is positive but whose computed size is zero is
    an error (the dataset is too small for the request).
    """
    if len(ds) == 0:
        raise DatasetError("cannot split an empty dataset")
    if len(ratios) != 3:
        raise DatasetError("ratios must be a (train, estimation, test) triple")
    if any(r < 0 for r in ratios):
        raise DatasetError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)!r}")

    n = len(ds)
    n_train = int(n * ratios[0])
    n_est = int(n * ratios[1])
    n_test = n - n_train - n_est
    for label, size, ratio in (("train", n_train, ratios[0]),
                               ("estimation", n_est, ratios[1]),
                               ("test", n_test, ratios[2])):
        if ratio > 0 and size == 0:
            raise DatasetError(f"{label} split is empty (n={n}, ratio={ratio})")

    order = rng_for(seed, "split").permutation(n)
    ids = ds.ids()
    shuffled = [ids[i] for i in order]
    return DataSplit(
        train=frozenset(shuffled[:n_train]),
        estimation=frozenset(shuffled[n_train:n_train + n_est]),
        test=frozenset(shuffled[n_train + n_est:]),
    )


def apply_restriction(
    ids: Iterable[str],
    ctx: RestrictionContext,
    ds: Dataset,
    min_stratum_size: int = DEFAULT_MIN_STRATUM_SIZE,
) -> dict[str, frozenset[str]]:
    """Partition an id set into strata of identical confounder levels.

    Continuous confounders are rejected. Strata smaller than
    ``min_stratum_size`` are dropped with a logged warning, so the union of
    the returned strata may be a proper subset of the input ids.
    """
    for name in ctx.confounders:
        meta = ds.meta_for(name)
        if meta.kind == "continuous":
            raise RestrictionError(f"cannot stratify on continuous covariate {name}")

    id_list = sorted(set(ids))
    if not ctx.confounders:
        return {"": frozenset(id_list)}

    strata: dict[str, list[str]] = {}
    for sid in id_list:
        covs = ds.sample(sid).covariates
        key = stratum_key(ctx.confounders, {c: str(covs[c]) for c in ctx.confounders})
        strata.setdefault(key, []).append(sid)

    kept: dict[str, frozenset[str]] = {}
    for key in sorted(strata):
        members = strata[key]
        if len(members) < min_stratum_size:
            log.warning(
                "dropping stratum %s: %d samples < min_stratum_size %d",
                key, len(members), min_stratum_size,
            )
            continue
        kept[key] = frozenset(members)
    return kept


def remaining_covariates(ds: Dataset, validated: Iterable[str]) -> list[str]:
    """All covariate names minus the validated set, in metadata order."""
    validated = set(validated)
    unknown = validated - set(ds.covariate_names)
    if unknown:
        raise DatasetError(f"unknown covariate {sorted(unknown)[0]}")
    return [name for name in ds.covariate_names if name not in validated]
