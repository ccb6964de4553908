import json

import numpy as np
import pytest

from fairtune import debias, harness, metrics
from fairtune.data import SplitSpec, SyntheticSpec
from fairtune.errors import FairtuneError
from fairtune.harness import (
    DatasetConfig,
    ExperimentConfig,
    aggregate_trials,
    baseline_cache_key,
    evaluate_checkpoint,
    fit_delta_model,
    normalized_coef_svd,
    run_sweep,
    sensitivity_study,
    train_baseline,
    variance_study,
    write_json,
)
from fairtune.metrics import ObjectiveSpec
from fairtune.network import TrainConfig, save_checkpoint


def small_config(tmp_path, **overrides):
    base = dict(
        dataset=DatasetConfig(synthetic=SyntheticSpec(
            n=3000, d=6, target_spd=0.3, group0_fraction=0.75, seed=3
        )),
        split=SplitSpec(seed=5),
        architecture=(8,),
        train=TrainConfig(max_epochs=8, patience=2, seed=0),
        objective=ObjectiveSpec(measure="spd", epsilon=0.05),
        methods=("default", "random", "roc"),
        method_configs={"random": {"iterations": 10}},
        seeds=(0,),
        output_dir=str(tmp_path / "out"),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestAggregate:
    def _trial(self, method, seed, objective, bias=0.1, performance=0.7):
        return {
            "method": method, "seed": seed, "status": "ok",
            "test": {"objective": objective, "bias": bias, "performance": performance},
            "valid": {"objective": objective, "bias": bias, "performance": performance},
        }

    def test_median_objective(self, tmp_path):
        cfg = small_config(tmp_path, methods=("random",), seeds=(0, 1, 2, 3, 4))
        trials = [self._trial("random", s, o)
                  for s, o in enumerate([0.0, 0.0, 0.8, 0.81, 0.82])]
        agg = aggregate_trials(trials, cfg)
        assert agg["methods"]["random"]["test_objective_median"] == 0.8

    def test_single_trial_aggregate_equals_trial(self, tmp_path):
        cfg = small_config(tmp_path, methods=("random",), seeds=(0,))
        trials = [self._trial("random", 0, 0.66, bias=-0.02, performance=0.71)]
        agg = aggregate_trials(trials, cfg)["methods"]["random"]
        assert agg["test_objective_median"] == 0.66
        assert agg["test_bias_mean"] == -0.02
        assert agg["test_bias_std"] == 0.0
        assert agg["n_trials"] == 1

    def test_failures_counted(self, tmp_path):
        cfg = small_config(tmp_path, methods=("random",), seeds=(0, 1))
        trials = [
            self._trial("random", 0, 0.5),
            {"method": "random", "seed": 1, "status": "error", "error": "boom"},
        ]
        agg = aggregate_trials(trials, cfg)["methods"]["random"]
        assert agg["n_trials"] == 1
        assert agg["failures"] == 1


class TestSweep:
    def test_sweep_writes_deterministic_artifacts(self, tmp_path):
        cfg = small_config(tmp_path)
        run_sweep(cfg)
        out = tmp_path / "out"
        first = (out / "aggregate.json").read_bytes(), (out / "trials.json").read_bytes()
        run_sweep(cfg)
        second = (out / "aggregate.json").read_bytes(), (out / "trials.json").read_bytes()
        assert first == second
        agg = json.loads(first[0])
        assert set(agg["methods"]) == {"default", "random", "roc"}
        assert (out / "long.csv").exists()
        assert (out / "aggregate.csv").exists()
        assert (out / "timings.json").exists()

    def test_trial_failure_recorded_not_fatal(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise FairtuneError("synthetic failure")

        monkeypatch.setattr(debias, "random_perturbation", boom)
        cfg = small_config(tmp_path)
        result = run_sweep(cfg, write=False)
        by_method = {t["method"]: t for t in result["trials"]}
        assert by_method["random"]["status"] == "error"
        assert "synthetic failure" in by_method["random"]["error"]
        assert by_method["default"]["status"] == "ok"

    def test_default_positive_flag(self, tmp_path):
        cfg = small_config(tmp_path, methods=("default",))
        result = run_sweep(cfg, write=False)
        flags = result["aggregate"]["default_objective_positive"]
        assert set(flags) == {"0"}
        assert isinstance(flags["0"], bool)


class TestBaselineCache:
    def test_cache_reused(self, tmp_path):
        cfg = small_config(tmp_path)
        from fairtune.data import split_standardize
        ds = cfg.dataset.load()
        tr, va, te = split_standardize(ds, cfg.split)
        cache = tmp_path / "cache"
        net1 = train_baseline(cfg, tr, va, 0, cache)
        files = list(cache.glob("*.npz"))
        assert len(files) == 1
        mtime = files[0].stat().st_mtime_ns
        net2 = train_baseline(cfg, tr, va, 0, cache)
        assert files[0].stat().st_mtime_ns == mtime
        X = te.features[:10]
        assert np.array_equal(net1.forward(X), net2.forward(X))

    def test_key_changes_with_config(self, tmp_path):
        cfg1 = small_config(tmp_path)
        cfg2 = small_config(tmp_path, train=TrainConfig(max_epochs=9, patience=2, seed=0))
        assert baseline_cache_key(cfg1, 0) != baseline_cache_key(cfg2, 0)
        assert baseline_cache_key(cfg1, 0) != baseline_cache_key(cfg1, 1)


class TestVarianceStudy:
    def test_single_network_flagged(self, tmp_path):
        cfg = small_config(tmp_path)
        res = variance_study(cfg, networks=1, write=False)
        assert res["single_network"] is True
        for stats in res["measures"].values():
            assert stats["std"] == 0.0

    def test_reports_all_measures(self, tmp_path):
        cfg = small_config(tmp_path)
        res = variance_study(cfg, networks=2, write=False)
        assert set(res["measures"]) == {"aod", "eod", "spd", "accuracy"}
        assert len(res["per_seed"]) == 2


class TestSensitivity:
    def test_rank_one_rows_svd(self):
        row = np.array([3.0, 4.0, 0.0])
        svals = normalized_coef_svd(np.stack([row, 2 * row, -row, 5 * row]))
        assert svals[0] == pytest.approx(2.0)  # sqrt(K) with K=4
        assert np.allclose(svals[1:], 0.0, atol=1e-12)

    def test_orthogonal_rows_svd_near_one(self):
        svals = normalized_coef_svd(np.eye(4, 10))
        assert np.allclose(svals, 1.0)

    def test_linear_toy_r2(self):
        rng = np.random.default_rng(0)
        deltas = rng.normal(1.0, 0.1, size=(200, 1))
        values = 0.4 * deltas[:, 0] - 0.1
        coef, r2, used_ridge = fit_delta_model(deltas, values)
        assert r2 > 0.99
        assert not used_ridge
        assert coef[0] == pytest.approx(0.4, rel=1e-6)

    def test_underdetermined_uses_ridge(self):
        rng = np.random.default_rng(1)
        deltas = rng.normal(1.0, 0.1, size=(10, 50))
        values = deltas @ rng.normal(size=50)
        coef, r2, used_ridge = fit_delta_model(deltas, values)
        assert used_ridge
        assert r2 > 0.99  # interpolating fit

    def test_full_study_shapes(self, tmp_path):
        cfg = small_config(tmp_path)
        res = sensitivity_study(cfg, networks=2, deltas=30, write=False)
        assert len(res["r2"]) == 2
        assert len(res["singular_values"]) == 2
        assert all(res["used_ridge"])  # 30 deltas < parameter count


class TestEvaluateCheckpoint:
    def test_matches_fresh_evaluation(self, tmp_path, tiny_net, tiny_splits, spd_spec):
        _, _, te = tiny_splits
        path = tmp_path / "m.npz"
        save_checkpoint(tiny_net, path)
        rep = evaluate_checkpoint(path, te, spd_spec, 0.5)
        fresh = metrics.evaluate(spd_spec, te.labels, tiny_net.forward(te.features),
                                 te.protected, 0.5)
        assert rep.to_dict() == fresh.to_dict()

    def test_extreme_thresholds(self, tmp_path, tiny_net, tiny_splits, spd_spec):
        _, _, te = tiny_splits
        path = tmp_path / "m.npz"
        save_checkpoint(tiny_net, path)
        all_ones = evaluate_checkpoint(path, te, spd_spec, 0.0)
        assert all_ones.performance == 0.5  # TPR 1, TNR 0
        all_zeros = evaluate_checkpoint(path, te, spd_spec, 1.0)
        assert all_zeros.performance == 0.5


class TestWriteJson:
    def test_nan_becomes_null(self, tmp_path):
        path = tmp_path / "x.json"
        write_json(path, {"a": float("nan"), "b": np.float64(1.5), "c": np.int64(2)})
        data = json.loads(path.read_text())
        assert data == {"a": None, "b": 1.5, "c": 2}

    def test_byte_stable(self, tmp_path):
        obj = {"z": [1.25, 2.5], "a": {"nested": 0.1}}
        p1, p2 = tmp_path / "1.json", tmp_path / "2.json"
        write_json(p1, obj)
        write_json(p2, obj)
        assert p1.read_bytes() == p2.read_bytes()


class TestConfig:
    def test_from_dict_roundtrip(self, tmp_path):
        raw = {
            "dataset": {"synthetic": {"n": 1000, "d": 5, "target_spd": 0.2, "seed": 1}},
            "split": {"fractions": [0.5, 0.25, 0.25], "seed": 2},
            "architecture": [16, 8],
            "train": {"max_epochs": 5, "patience": 1, "seed": 3},
            "objective": {"measure": "eod", "epsilon": 0.1},
            "methods": ["default", "random"],
            "seeds": [1, 2],
            "output_dir": str(tmp_path),
        }
        cfg = ExperimentConfig.from_dict(raw)
        assert cfg.architecture == (16, 8)
        assert cfg.objective.measure.value == "eod"
        assert cfg.split.fractions == (0.5, 0.25, 0.25)

    def test_unknown_method_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown methods"):
            small_config(tmp_path, methods=("nonsense",))

    def test_dataset_config_exclusive(self):
        with pytest.raises(ValueError):
            DatasetConfig()
        with pytest.raises(ValueError):
            DatasetConfig(csv_path="x.csv")
