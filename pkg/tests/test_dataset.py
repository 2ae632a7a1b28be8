import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confloop.dataset import (
    CovariateMeta,
    DataSplit,
    Dataset,
    DatasetError,
    RestrictionContext,
    RestrictionError,
    Sample,
    apply_restriction,
    load_dataset,
    remaining_covariates,
    split_dataset,
)
from conftest import binary_meta, make_dataset


def write_fixture(tmp_path, rows, meta=None):
    meta = meta if meta is not None else [
        {"name": "HTN", "description": "hypertension", "kind": "binary", "levels": ["0", "1"]},
        {"name": "DM", "description": "diabetes", "kind": "binary", "levels": ["0", "1"]},
    ]
    data = tmp_path / "data.csv"
    data.write_text("\n".join(rows) + "\n", encoding="utf-8")
    meta_path = tmp_path / "meta.json"
    meta_path.write_text(json.dumps(meta), encoding="utf-8")
    return data, meta_path


class TestLoadDataset:
    def test_basic_parse(self, tmp_path):
        data, meta = write_fixture(tmp_path, [
            "id,y,w,HTN,DM",
            "a,1.5,1,0,1",
            "b,0.0,0,1,1",
            "c,-2.25,1,0,0",
        ])
        ds = load_dataset(data, meta)
        assert len(ds) == 3
        assert ds.covariate_names == ["HTN", "DM"]
        assert ds.sample("a").outcome == 1.5
        assert ds.sample("b").covariates == {"HTN": "1", "DM": "1"}

    def test_bad_treatment_names_row(self, tmp_path):
        data, meta = write_fixture(tmp_path, [
            "id,y,w,HTN,DM",
            "a,1,1,0,1",
            "b,1,0,1,1",
            "c,1,1,0,0",
            "d,1,2,0,0",
        ])
        with pytest.raises(DatasetError, match="row 5"):
            load_dataset(data, meta)

    def test_unknown_covariate_column(self, tmp_path):
        data, meta = write_fixture(tmp_path, [
            "id,y,w,HTN,DM,AGE",
            "a,1,1,0,1,44",
        ])
        with pytest.raises(DatasetError, match="unknown covariate AGE"):
            load_dataset(data, meta)

    def test_missing_required_column(self, tmp_path):
        data, meta = write_fixture(tmp_path, ["id,y,HTN,DM", "a,1,0,1"])
        with pytest.raises(DatasetError, match="missing required column 'w'"):
            load_dataset(data, meta)

    def test_duplicate_id_names_row(self, tmp_path):
        data, meta = write_fixture(tmp_path, [
            "id,y,w,HTN,DM",
            "a,1,1,0,1",
            "a,2,0,1,1",
        ])
        with pytest.raises(DatasetError, match="row 3.*duplicate id"):
            load_dataset(data, meta)

    def test_value_outside_levels(self, tmp_path):
        data, meta = write_fixture(tmp_path, [
            "id,y,w,HTN,DM",
            "a,1,1,0,7",
        ])
        with pytest.raises(DatasetError, match="row 2"):
            load_dataset(data, meta)


class TestMeta:
    def test_binary_needs_two_levels(self):
        with pytest.raises(DatasetError, match="exactly two levels"):
            CovariateMeta("X", "", "binary", ("0",))

    def test_continuous_takes_no_levels(self):
        with pytest.raises(DatasetError, match="no levels"):
            CovariateMeta("X", "", "continuous", ("0", "1"))

    def test_covariate_mismatch_rejected(self):
        meta = binary_meta("HTN")
        with pytest.raises(DatasetError, match="do not match metadata"):
            Dataset(meta, [Sample("a", 1.0, 1, {"DM": "0"})])


class TestSplit:
    def test_documented_sizes(self):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * 1000, [i % 2 for i in range(1000)],
                          {"G": [str(i % 2) for i in range(1000)]})
        split = split_dataset(ds, (0.4, 0.4, 0.2), seed=7)
        assert (len(split.train), len(split.estimation), len(split.test)) == (400, 400, 200)

    def test_degenerate_all_train(self):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * 10, [i % 2 for i in range(10)],
                          {"G": ["0"] * 10})
        split = split_dataset(ds, (1.0, 0.0, 0.0), seed=1)
        assert len(split.train) == 10
        assert not split.estimation and not split.test

    def test_deterministic(self):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * 50, [i % 2 for i in range(50)],
                          {"G": [str(i % 2) for i in range(50)]})
        a = split_dataset(ds, (0.5, 0.3, 0.2), seed=3)
        b = split_dataset(ds, (0.5, 0.3, 0.2), seed=3)
        assert a == b
        c = split_dataset(ds, (0.5, 0.3, 0.2), seed=4)
        assert a != c

    def test_empty_split_with_positive_ratio_rejected(self):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * 3, [1, 0, 1], {"G": ["0", "1", "0"]})
        with pytest.raises(DatasetError, match="empty"):
            split_dataset(ds, (0.9, 0.05, 0.05), seed=0)

    def test_bad_ratio_sum(self):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * 4, [1, 0, 1, 0], {"G": ["0"] * 4})
        with pytest.raises(DatasetError, match="sum to 1"):
            split_dataset(ds, (0.5, 0.4, 0.2), seed=0)

    @given(n=st.integers(min_value=4, max_value=120), seed=st.integers(0, 2**20))
    @settings(max_examples=40, deadline=None)
    def test_partition_property(self, n, seed):
        meta = binary_meta("G")
        ds = make_dataset(meta, [0.0] * n, [i % 2 for i in range(n)],
                          {"G": [str(i % 2) for i in range(n)]})
        split = split_dataset(ds, (0.34, 0.33, 0.33), seed=seed)
        union = split.train | split.estimation | split.test
        assert len(split.train) + len(split.estimation) + len(split.test) == n
        assert union == set(ds.ids())


class TestRestriction:
    def test_single_confounder_two_strata(self):
        meta = binary_meta("HTN")
        ds = make_dataset(meta, [0.0] * 4, [1, 0, 1, 0], {"HTN": ["0", "0", "1", "1"]})
        strata = apply_restriction(ds.ids(), RestrictionContext(("HTN",)), ds, min_stratum_size=1)
        assert set(strata) == {"HTN=0", "HTN=1"}
        assert all(len(v) == 2 for v in strata.values())

    def test_empty_context_is_identity(self, tiny_ds):
        strata = apply_restriction(tiny_ds.ids(), RestrictionContext(()), tiny_ds)
        assert strata == {"": frozenset(tiny_ds.ids())}

    def test_min_stratum_size_drops(self, caplog):
        meta = binary_meta("HTN", "DM")
        # Joint levels: (0,0) x4, (0,1) x2, (1,0) x1, (1,1) x1
        htn = ["0", "0", "0", "0", "0", "0", "1", "1"]
        dm = ["0", "0", "0", "0", "1", "1", "0", "1"]
        ds = make_dataset(meta, [0.0] * 8, [1, 0, 1, 0, 1, 0, 1, 0], {"HTN": htn, "DM": dm})
        with caplog.at_level("WARNING"):
            strata = apply_restriction(ds.ids(), RestrictionContext(("HTN", "DM")), ds, min_stratum_size=3)
        assert set(strata) == {"HTN=0|DM=0"}
        assert len(strata["HTN=0|DM=0"]) == 4
        assert "dropping stratum" in caplog.text

    def test_strata_members_match_levels_exactly(self, tiny_ds):
        ctx = RestrictionContext(("HTN", "DM"))
        strata = apply_restriction(tiny_ds.ids(), ctx, tiny_ds, min_stratum_size=1)
        seen = set()
        for key, members in strata.items():
            assert not (members & seen)
            seen |= members
            levels = dict(pair.split("=") for pair in key.split("|"))
            for sid in members:
                covs = tiny_ds.sample(sid).covariates
                assert all(covs[c] == v for c, v in levels.items())

    def test_continuous_rejected(self):
        meta = [CovariateMeta("AGE", "age in years", "continuous")]
        ds = Dataset(meta, [Sample(f"s{i}", 0.0, i % 2, {"AGE": 40.0 + i}) for i in range(4)])
        with pytest.raises(RestrictionError, match="continuous"):
            apply_restriction(ds.ids(), RestrictionContext(("AGE",)), ds)

    def test_stratum_keys_must_match_confounders(self):
        with pytest.raises(DatasetError, match="stratum keys"):
            RestrictionContext(("HTN",), {"DM": "1"})


class TestRemainingCovariates:
    def test_order_preserved(self, tiny_ds):
        assert remaining_covariates(tiny_ds, {"HTN"}) == ["DM"]
        assert remaining_covariates(tiny_ds, set()) == ["HTN", "DM"]
        assert remaining_covariates(tiny_ds, {"HTN", "DM"}) == []

    def test_unknown_name(self, tiny_ds):
        with pytest.raises(DatasetError, match="unknown covariate"):
            remaining_covariates(tiny_ds, {"NOPE"})

    def test_insensitive_to_insertion_order(self, tiny_ds):
        assert remaining_covariates(tiny_ds, ["DM", "HTN"]) == remaining_covariates(tiny_ds, ["HTN", "DM"])


def test_datasplit_serialization_sorted():
    split = DataSplit(frozenset({"b", "a"}), frozenset({"c"}), frozenset({"d"}))
    assert split.to_dict() == {"train": ["a", "b"], "estimation": ["c"], "test": ["d"]}
