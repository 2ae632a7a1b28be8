import json

import numpy as np
import pytest

from confloop.causal_tree import Leaf, Tree, TreeParams, _Node, fit_tree
from confloop.dataset import RestrictionContext, load_dataset
from confloop.orchestrator import FinalModel, IterationModel, StratumModel
from confloop.synth import (
    ConfounderSpec,
    EffectPiece,
    SynthConfig,
    SynthError,
    default_covariates,
    evaluate_model,
    generate,
    write_fixture,
)
from oracles import brute_force_cate, mean


def confounded_config(seed=11, **overrides):
    base = dict(
        n=5000,
        confounders={"HTN": ConfounderSpec(treatment_log_odds_shift=1.5, outcome_shift=2.0)},
        default_effect=0.0,
        noise_sd=0.5,
        seed=seed,
    )
    base.update(overrides)
    return SynthConfig(**base)


def constant_model(cate: float, test_ids) -> FinalModel:
    leaf = Leaf(0, (), cate, 1, 1)
    tree = Tree("const", TreeParams(), ("HTN",), _Node(leaf=leaf), (leaf,), (), ())
    return FinalModel(
        iterations=(IterationModel(0, (StratumModel(RestrictionContext(()), tree),), ()),),
        validated=(),
        test_ids=tuple(test_ids),
    )


class TestGenerate:
    def test_unconfounded_naive_ate_near_truth(self):
        cfg = SynthConfig(n=5000, default_effect=1.0, noise_sd=1.0, seed=4)
        ds, truth = generate(cfg)
        y, w = ds.outcomes(), ds.treatments()
        naive = y[w == 1].mean() - y[w == 0].mean()
        assert truth.true_ate == 1.0
        # Monte Carlo bound ~ 2 * sd * sqrt(2/n) ≈ 0.04; generous margin.
        assert 0.9 <= naive <= 1.1

    def test_confounded_fixture_bias_and_strata(self):
        ds, truth = generate(confounded_config())
        y, w = ds.outcomes(), ds.treatments()
        naive = y[w == 1].mean() - y[w == 0].mean()
        assert truth.true_ate == 0.0
        assert naive > 0.5  # analytic confounded gap ≈ 2 * ΔP(HTN|W) ≈ 0.71
        for level in ("0", "1"):
            m = ds.column("HTN") == level
            yl, wl = y[m], w[m]
            within = yl[wl == 1].mean() - yl[wl == 0].mean()
            assert -0.1 <= within <= 0.1

    def test_noiseless_piecewise_effect_is_exact_in_tree(self):
        cfg = SynthConfig(
            n=800,
            effect_pieces=(EffectPiece(when={"DM": "1"}, effect=2.0),),
            default_effect=-1.0,
            noise_sd=0.0,
            seed=2,
        )
        ds, truth = generate(cfg)
        tree = fit_tree(ds, ds.ids(), ["DM"], TreeParams(max_depth=1, min_leaf_per_arm=5, seed=0))
        assert len(tree.leaves) == 2
        for leaf in tree.leaves:
            expected = brute_force_cate(ds, tree.est_ids, leaf.path)
            assert leaf.cate == expected
            assert leaf.cate in (2.0, -1.0)

    def test_deterministic_under_seed(self):
        a, ta = generate(confounded_config(n=500))
        b, tb = generate(confounded_config(n=500))
        assert [s.outcome for s in a.samples] == [s.outcome for s in b.samples]
        assert ta.tau == tb.tau

    def test_true_ate_matches_mean_tau(self):
        cfg = SynthConfig(
            n=700,
            effect_pieces=(EffectPiece(when={"AF": "1"}, effect=3.0),),
            default_effect=0.5,
            noise_sd=1.0,
            seed=9,
        )
        _, truth = generate(cfg)
        assert truth.true_ate == pytest.approx(mean(truth.tau.values()))

    def test_confounding_bias_monotone_in_shift(self):
        biases = []
        for shift in (0.5, 1.5, 3.0):
            ds, _ = generate(confounded_config(
                n=4000,
                confounders={"HTN": ConfounderSpec(shift, 2.0)},
                seed=21,
            ))
            y, w = ds.outcomes(), ds.treatments()
            biases.append(abs(y[w == 1].mean() - y[w == 0].mean()))
        assert biases[0] <= biases[1] <= biases[2]

    def test_degenerate_draw_rejected(self):
        with pytest.raises(SynthError, match="re-seed"):
            generate(SynthConfig(n=20, base_rate_treated=0.999, seed=0))

    def test_invalid_configs(self):
        with pytest.raises(SynthError):
            SynthConfig(n=0)
        with pytest.raises(SynthError):
            SynthConfig(n=10, noise_sd=-1)
        with pytest.raises(SynthError):
            SynthConfig(n=10, confounders={"NOPE": ConfounderSpec(1, 1)})

    def test_default_vocabulary(self):
        names = [m.name for m in default_covariates()]
        assert names == ["HTN", "DM", "CHF", "AF", "CAD", "CVAD", "CKD", "COPDA", "GOUT"]


class TestFixtureFiles:
    def test_round_trip_through_loader(self, tmp_path):
        ds, truth = generate(confounded_config(n=300))
        paths = write_fixture(ds, truth, tmp_path)
        loaded = load_dataset(paths["data"], paths["metadata"])
        assert len(loaded) == 300
        assert loaded.covariate_names == ds.covariate_names
        assert loaded.outcomes().tolist() == ds.outcomes().tolist()
        stored = json.loads(paths["ground_truth"].read_text())
        assert stored["true_ate"] == truth.true_ate

    def test_rerun_identical_bytes(self, tmp_path):
        ds, truth = generate(confounded_config(n=120))
        write_fixture(ds, truth, tmp_path / "a")
        write_fixture(ds, truth, tmp_path / "b")
        for name in ("data.csv", "metadata.json", "ground_truth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestEvaluateModel:
    def test_perfect_model_on_noiseless_data(self):
        cfg = SynthConfig(n=400, default_effect=1.5, noise_sd=0.0, seed=3)
        ds, truth = generate(cfg)
        model = constant_model(1.5, ds.ids())
        scores = evaluate_model(model, ds, truth)
        assert scores["pehe"] == 0.0
        assert scores["ate_error"] == 0.0

    def test_constant_zero_versus_unit_effect(self):
        cfg = SynthConfig(n=300, default_effect=1.0, noise_sd=0.5, seed=6)
        ds, truth = generate(cfg)
        model = constant_model(0.0, ds.ids())
        scores = evaluate_model(model, ds, truth)
        assert scores["pehe"] == pytest.approx(1.0)
        assert scores["ate_error"] == pytest.approx(1.0)
