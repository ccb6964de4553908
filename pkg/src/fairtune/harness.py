"""Experiment runner: baseline training, method sweeps, and the two
seed-sensitivity studies.

Test-set hygiene is structural: every selection step (thresholds, weights,
rules) sees only the validation split; the test split enters exactly once,
after selection, to produce the reported numbers.  Result JSON artifacts
are byte-stable across reruns; wall-clock timings go to a separate file.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import blackbox, debias, metrics, postproc
from .data import DataSet, Schema, SplitSpec, SyntheticSpec, generate_synthetic, load_csv, load_schema, split_standardize
from .errors import FairtuneError
from .metrics import BiasMeasure, EvalReport, ObjectiveSpec
from .network import Network, TrainConfig, get_flat, load_checkpoint, save_checkpoint, set_flat, train

INTRA_METHODS = ("random", "layerwise", "adversarial", "zhang")
POST_METHODS = ("roc", "eqodds", "calib-eqodds")
ALL_METHODS = ("default", *INTRA_METHODS, *POST_METHODS)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Either a synthetic spec or a CSV path plus schema."""

    synthetic: SyntheticSpec | None = None
    csv_path: str | None = None
    schema_path: str | None = None
    drop_protected_feature: bool = False

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_path is None):
            raise ValueError("configure exactly one of synthetic or csv dataset")
        if self.csv_path is not None and self.schema_path is None:
            raise ValueError("csv dataset requires a schema path")

    def load(self) -> DataSet:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        schema = load_schema(self.schema_path)
        return load_csv(self.csv_path, schema, self.drop_protected_feature)

    def fingerprint(self) -> str:
        if self.synthetic is not None:
            return json.dumps(vars(self.synthetic), sort_keys=True)
        digest = hashlib.sha256(Path(self.csv_path).read_bytes()).hexdigest()
        return f"csv:{digest}:drop={self.drop_protected_feature}"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    split: SplitSpec = SplitSpec()
    architecture: tuple[int, ...] = (32,) * 10
    dropout: float = 0.2
    train: TrainConfig = TrainConfig()
    objective: ObjectiveSpec = ObjectiveSpec()
    methods: tuple[str, ...] = ALL_METHODS
    method_configs: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "results"

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; pick from {ALL_METHODS}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        ds_raw = raw.get("dataset") or {}
        if "synthetic" in ds_raw:
            dataset = DatasetConfig(synthetic=SyntheticSpec(**ds_raw["synthetic"]))
        else:
            csv = ds_raw.get("csv") or {}
            dataset = DatasetConfig(
                csv_path=csv.get("path"),
                schema_path=csv.get("schema"),
                drop_protected_feature=bool(csv.get("drop_protected_feature", False)),
            )
        split_raw = raw.get("split") or {}
        split = SplitSpec(
            fractions=tuple(split_raw.get("fractions", (0.6, 0.2, 0.2))),
            seed=int(split_raw.get("seed", 0)),
        )
        train_cfg = TrainConfig(**(raw.get("train") or {}))
        obj_raw = raw.get("objective") or {}
        objective = ObjectiveSpec(
            measure=BiasMeasure.parse(obj_raw.get("measure", "spd")),
            epsilon=float(obj_raw.get("epsilon", 0.05)),
        )
        return cls(
            dataset=dataset,
            split=split,
            architecture=tuple(raw.get("architecture", (32,) * 10)),
            dropout=float(raw.get("dropout", 0.2)),
            train=train_cfg,
            objective=objective,
            methods=tuple(raw.get("methods", ALL_METHODS)),
            method_configs=dict(raw.get("method_configs") or {}),
            seeds=tuple(raw.get("seeds", (0, 1, 2, 3, 4))),
            output_dir=str(raw.get("output_dir", "results")),
        )

    @classmethod
    def from_yaml(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if overrides:
            raw = merge_config(raw, overrides)
        return cls.from_dict(raw)


def merge_config(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# Deterministic JSON
# ---------------------------------------------------------------------------

def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    return obj


def write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, fixed separators, NaN mapped to null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_sanitize(obj), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Baseline training with checkpoint cache
# ---------------------------------------------------------------------------

def baseline_cache_key(cfg: ExperimentConfig, seed: int) -> str:
    payload = json.dumps({
        "dataset": cfg.dataset.fingerprint(),
        "split": [cfg.split.fractions, cfg.split.seed],
        "architecture": list(cfg.architecture),
        "dropout": cfg.dropout,
        "train": cfg.train.to_dict(),
        "seed": seed,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def train_baseline(cfg: ExperimentConfig, train_ds: DataSet, valid_ds: DataSet,
                   seed: int, cache_dir: Path | None = None) -> Network:
    """Train (or fetch from cache) the baseline network for one seed."""
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"baseline_{baseline_cache_key(cfg, seed)}.npz"
        if path.exists():
            return load_checkpoint(path)
    net = train(
        train_ds, valid_ds, cfg.architecture,
        replace(cfg.train, seed=seed), dropout_rate=cfg.dropout,
    )
    if cache_dir is not None:
        save_checkpoint(net, path)
    return net


# ---------------------------------------------------------------------------
# Single method runs
# ---------------------------------------------------------------------------

def _method_config(cfg: ExperimentConfig, name: str, seed: int):
    raw = dict(cfg.method_configs.get(name, {}))
    raw.setdefault("seed", seed)
    if name == "random":
        return debias.RandomPerturbConfig(**raw)
    if name == "layerwise":
        for key, klass in (("acquisition", blackbox.AcquisitionSpec), ("gbrt", blackbox.GBRTConfig)):
            if key in raw and isinstance(raw[key], dict):
                raw[key] = klass(**raw[key])
        return debias.LayerwiseConfig(**raw)
    if name == "adversarial":
        if "critic_hidden" in raw:
            raw["critic_hidden"] = tuple(raw["critic_hidden"])
        return debias.AdversarialConfig(**raw)
    if name == "zhang":
        if "critic_hidden" in raw:
            raw["critic_hidden"] = tuple(raw["critic_hidden"])
        return debias.ProtectedAdversaryConfig(**raw)
    return raw


def run_method(name: str, baseline: Network, valid: DataSet, test: DataSet,
               spec: ObjectiveSpec, cfg: ExperimentConfig, seed: int,
               artifacts: dict | None = None) -> dict:
    """Run one method for one baseline; returns the trial payload.

    Valid-split selection happens inside the method; the test split is
    evaluated afterwards with the selected weights/threshold/rule.  When a
    dict is passed as ``artifacts`` the fitted object (DebiasResult or
    PostprocRule) is stowed under "result" / "rule" for callers that want
    to persist it.
    """
    if name == "default":
        # the untouched baseline at its natural operating point
        tau = 0.5
        scores_v = baseline.forward(valid.features)
        valid_report = metrics.evaluate(spec, valid.labels, scores_v, valid.protected, tau)
        scores_t = baseline.forward(test.features)
        test_report = metrics.evaluate(spec, test.labels, scores_t, test.protected, tau)
        return {"valid": valid_report.to_dict(), "test": test_report.to_dict(),
                "threshold": tau}

    if name in INTRA_METHODS:
        mcfg = _method_config(cfg, name, seed)
        fn = {
            "random": debias.random_perturbation,
            "layerwise": debias.layerwise_optimization,
            "adversarial": debias.adversarial_finetune,
            "zhang": debias.protected_attr_adversarial,
        }[name]
        result = fn(baseline, valid, spec, mcfg)
        tuned = result.apply_to(baseline)
        scores_t = tuned.forward(test.features)
        test_report = metrics.evaluate(
            spec, test.labels, scores_t, test.protected, result.threshold
        )
        result.test_report = test_report
        if artifacts is not None:
            artifacts["result"] = result
        return {"valid": result.valid_report.to_dict(), "test": test_report.to_dict(),
                "threshold": result.threshold, "trace": result.trace}

    if name in POST_METHODS:
        raw = dict(cfg.method_configs.get(name, {}))
        scores_v = baseline.forward(valid.features)
        scores_t = baseline.forward(test.features)
        if name == "roc":
            rule = postproc.fit_reject_option(
                scores_v, valid.labels, valid.protected, spec,
                unprivileged=int(raw.get("unprivileged", 1)),
            )
        elif name == "eqodds":
            rule = postproc.fit_eq_odds(
                scores_v, valid.labels, valid.protected, seed=seed,
                tolerance=float(raw.get("tolerance", 1e-2)),
                grid_step=float(raw.get("grid_step", 0.02)),
            )
        else:
            rule = postproc.fit_calibrated_eq_odds(
                scores_v, valid.labels, valid.protected,
                cost=raw.get("cost", "fnr"), seed=seed,
            )
        if artifacts is not None:
            artifacts["rule"] = rule
        preds_v = postproc.apply(rule, scores_v, valid.protected, seed=seed)
        preds_t = postproc.apply(rule, scores_t, test.protected, seed=seed + 1)
        valid_report = metrics.report_from_predictions(
            spec, valid.labels, preds_v, valid.protected, rule.base_threshold
        )
        test_report = metrics.report_from_predictions(
            spec, test.labels, preds_t, test.protected, rule.base_threshold
        )
        return {"valid": valid_report.to_dict(), "test": test_report.to_dict(),
                "threshold": rule.base_threshold, "rule": json.loads(rule.to_json())}

    raise ValueError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def run_sweep(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Every (method, seed) cell; per-trial failures are recorded, not fatal.

    Returns {"trials": [...], "aggregate": {...}} and, when ``write`` is
    set, writes trials.json / aggregate.json / aggregate.csv / long.csv
    (deterministic) plus timings.json (not deterministic).
    """
    out_dir = Path(cfg.output_dir)
    ds = cfg.dataset.load()
    train_ds, valid_ds, test_ds = split_standardize(ds, cfg.split)
    cache_dir = out_dir / "cache" if write else None

    trials = []
    timings = []
    for seed in cfg.seeds:
        try:
            baseline = train_baseline(cfg, train_ds, valid_ds, seed, cache_dir)
        except FairtuneError as exc:
            for name in cfg.methods:
                trials.append({"method": name, "seed": seed, "status": "error",
                               "error": f"baseline training failed: {exc}"})
            continue
        for name in cfg.methods:
            t0 = time.perf_counter()
            try:
                payload = run_method(name, baseline, valid_ds, test_ds,
                                     cfg.objective, cfg, seed)
                trial = {"method": name, "seed": seed, "status": "ok"}
                trace = payload.pop("trace", None)
                trial.update(payload)
                if trace is not None and write:
                    trace_path = out_dir / "traces" / f"{name}_seed{seed}.json"
                    write_json(trace_path, trace)
                    trial["trace_file"] = str(trace_path.relative_to(out_dir))
            except FairtuneError as exc:
                trial = {"method": name, "seed": seed, "status": "error", "error": str(exc)}
            timings.append({"method": name, "seed": seed,
                            "seconds": time.perf_counter() - t0})
            trials.append(trial)

    aggregate = aggregate_trials(trials, cfg)
    if write:
        write_json(out_dir / "trials.json", trials)
        write_json(out_dir / "aggregate.json", aggregate)
        write_json(out_dir / "timings.json", timings)
        _write_tables(out_dir, trials, aggregate)
    return {"trials": trials, "aggregate": aggregate}


def aggregate_trials(trials: list[dict], cfg: ExperimentConfig) -> dict:
    """Mean and std of test bias, median of test objective, per method."""
    default_positive = {
        t["seed"]: t["test"]["objective"] > 0.0
        for t in trials if t["method"] == "default" and t["status"] == "ok"
    }
    per_method: dict[str, dict] = {}
    for name in cfg.methods:
        ok = [t for t in trials if t["method"] == name and t["status"] == "ok"]
        failures = [t for t in trials if t["method"] == name and t["status"] == "error"]
        if not ok:
            per_method[name] = {"n_trials": 0, "failures": len(failures)}
            continue
        biases = np.array([t["test"]["bias"] for t in ok])
        objectives = np.array([t["test"]["objective"] for t in ok])
        perfs = np.array([t["test"]["performance"] for t in ok])
        per_method[name] = {
            "n_trials": len(ok),
            "failures": len(failures),
            "test_bias_mean": float(np.mean(biases)),
            "test_bias_std": float(np.std(biases, ddof=1)) if len(ok) > 1 else 0.0,
            "test_objective_median": float(np.median(objectives)),
            "test_performance_mean": float(np.mean(perfs)),
        }
    return {
        "methods": per_method,
        "objective": cfg.objective.to_dict(),
        "seeds": list(cfg.seeds),
        "default_objective_positive": {str(k): v for k, v in default_positive.items()},
    }


def _write_tables(out_dir: Path, trials: list[dict], aggregate: dict) -> None:
    rows = []
    for name, stats in aggregate["methods"].items():
        rows.append({"method": name, **stats})
    pd.DataFrame(rows).to_csv(out_dir / "aggregate.csv", index=False)

    long_rows = []
    default_positive = aggregate["default_objective_positive"]
    for t in trials:
        if t["status"] != "ok":
            continue
        for split in ("valid", "test"):
            for metric_name in ("bias", "performance", "objective"):
                long_rows.append({
                    "method": t["method"],
                    "seed": t["seed"],
                    "split": split,
                    "metric": metric_name,
                    "value": t[split][metric_name],
                    "default_objective_positive": default_positive.get(str(t["seed"])),
                })
    pd.DataFrame(long_rows).to_csv(out_dir / "long.csv", index=False)


# ---------------------------------------------------------------------------
# Variance study
# ---------------------------------------------------------------------------

def variance_study(cfg: ExperimentConfig, networks: int = 10,
                   write: bool = True) -> dict:
    """Mean and std of SPD/EOD/AOD/accuracy over retrained seeds.

    Networks differ only in their training seed; metrics use hard
    predictions at threshold 0.5 on the test split.  Sample std (ddof 1);
    a single network reports std 0 and is flagged.
    """
    ds = cfg.dataset.load()
    train_ds, valid_ds, test_ds = split_standardize(ds, cfg.split)
    out_dir = Path(cfg.output_dir)
    cache_dir = out_dir / "cache" if write else None

    per_seed = []
    for k in range(networks):
        seed = cfg.train.seed + k
        net = train_baseline(cfg, train_ds, valid_ds, seed, cache_dir)
        preds = (net.forward(test_ds.features) > 0.5).astype(int)
        per_seed.append({
            "seed": seed,
            "spd": metrics.bias(BiasMeasure.SPD, test_ds.labels, preds, test_ds.protected),
            "eod": metrics.bias(BiasMeasure.EOD, test_ds.labels, preds, test_ds.protected),
            "aod": metrics.bias(BiasMeasure.AOD, test_ds.labels, preds, test_ds.protected),
            "accuracy": metrics.accuracy(test_ds.labels, preds),
        })

    table = {}
    for key in ("aod", "eod", "spd", "accuracy"):
        vals = np.array([row[key] for row in per_seed])
        table[key] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals, ddof=1)) if networks > 1 else 0.0,
        }
    result = {
        "networks": networks,
        "single_network": networks == 1,
        "measures": table,
        "per_seed": per_seed,
    }
    if write:
        write_json(out_dir / "variance_study.json", result)
        pd.DataFrame(
            [{"measure": k, **v} for k, v in table.items()]
        ).to_csv(out_dir / "variance_study.csv", index=False)
    return result


# ---------------------------------------------------------------------------
# Sensitivity study
# ---------------------------------------------------------------------------

def fit_delta_model(deltas: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Least-squares linear fit of values against delta vectors.

    Returns (coefficients, in-sample R^2, used_ridge).  When the system is
    underdetermined (fewer deltas than parameters) a minimal ridge penalty
    (1e-6) is solved in the dual and flagged.
    """
    X = np.asarray(deltas, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64).ravel()
    v, p = X.shape
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    used_ridge = v <= p
    if used_ridge:
        gram = Xc @ Xc.T
        gram[np.diag_indices_from(gram)] += 1e-6
        coef = Xc.T @ np.linalg.solve(gram, yc)
    else:
        coef, *_ = np.linalg.lstsq(Xc, yc, rcond=None)
    pred = Xc @ coef + y_mean
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y_mean) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return coef, r2, used_ridge


def normalized_coef_svd(coefs: np.ndarray) -> np.ndarray:
    """Singular values of the row-normalized coefficient matrix.

    Rows are scaled to unit length (zero rows left as-is); values near 1
    for every singular value indicate near-orthogonal coefficient vectors,
    while identical rows concentrate everything in the first value (sqrt K).
    """
    C = np.asarray(coefs, dtype=np.float64)
    norms = np.linalg.norm(C, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return np.linalg.svd(C / norms, compute_uv=False)


def sensitivity_study(cfg: ExperimentConfig, networks: int = 10, deltas: int = 1000,
                      write: bool = True) -> dict:
    """How much each weight contributes to SPD, per retraining seed.

    For each network, multiplicative delta vectors ~ N(1, 0.1) perturb all
    trainable parameters; test SPD at threshold 0.5 is recorded per delta
    and a linear model predicts SPD from the delta vector.  The
    row-normalized coefficient matrix across networks is decomposed by SVD.
    """
    ds = cfg.dataset.load()
    train_ds, valid_ds, test_ds = split_standardize(ds, cfg.split)
    out_dir = Path(cfg.output_dir)
    cache_dir = out_dir / "cache" if write else None

    coef_rows = []
    r2_list = []
    ridge_flags = []
    curves = []
    for k in range(networks):
        seed = cfg.train.seed + k
        net = train_baseline(cfg, train_ds, valid_ds, seed, cache_dir)
        flat = get_flat(net)
        rng = np.random.default_rng(seed + 1_000_003)
        delta_mat = rng.normal(1.0, 0.1, size=(deltas, flat.values.size))
        spd = np.empty(deltas)
        for i in range(deltas):
            perturbed = set_flat(net, flat.values * delta_mat[i])
            preds = (perturbed.forward(test_ds.features) > 0.5).astype(int)
            spd[i] = metrics.bias(BiasMeasure.SPD, test_ds.labels, preds, test_ds.protected)
        coef, r2, used_ridge = fit_delta_model(delta_mat, spd)
        coef_rows.append(coef)
        r2_list.append(r2)
        ridge_flags.append(used_ridge)
        curves.append(np.sort(np.abs(coef))[::-1])

    singular_values = normalized_coef_svd(np.stack(coef_rows))
    result = {
        "networks": networks,
        "deltas": deltas,
        "r2": r2_list,
        "used_ridge": ridge_flags,
        "singular_values": singular_values.tolist(),
        "abs_coefficient_curves": [c.tolist() for c in curves],
    }
    if write:
        write_json(out_dir / "sensitivity_study.json", result)
    return result


# ---------------------------------------------------------------------------
# Checkpoint evaluation
# ---------------------------------------------------------------------------

def evaluate_checkpoint(model_path, ds: DataSet, spec: ObjectiveSpec,
                        threshold: float) -> EvalReport:
    """Pure evaluation of a saved model on a dataset at a fixed threshold."""
    net = load_checkpoint(model_path)
    scores = net.forward(ds.features)
    return metrics.evaluate(spec, ds.labels, scores, ds.protected, threshold)
