"""Command-line interface.

Every experiment is driven by a YAML config; any field can be overridden
on the command line with repeated ``--set dotted.path=value`` flags (plus
a few common shortcuts).  Result JSON files are byte-identical across
reruns of the same config; wall-clock timings are written separately.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click
import numpy as np
import yaml

from . import harness, metrics, postproc
from .errors import FairtuneError
from .harness import ExperimentConfig, write_json
from .network import save_checkpoint


def _parse_override(text: str):
    if "=" not in text:
        raise click.BadParameter(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    node: dict = {}
    leaf = node
    parts = key.strip().split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    return node


def _load_config(config_path, sets, output=None, seeds=None, epsilon=None,
                 measure=None) -> ExperimentConfig:
    overrides: dict = {}
    for text in sets:
        overrides = harness.merge_config(overrides, _parse_override(text))
    if output is not None:
        overrides["output_dir"] = output
    if seeds:
        overrides["seeds"] = [int(s) for s in seeds.split(",")]
    if epsilon is not None:
        overrides.setdefault("objective", {})
        overrides["objective"]["epsilon"] = epsilon
    if measure is not None:
        overrides.setdefault("objective", {})
        overrides["objective"]["measure"] = measure
    return ExperimentConfig.from_yaml(config_path, overrides)


common_options = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=True),
                 help="YAML experiment config."),
    click.option("--set", "sets", multiple=True,
                 help="Override any config field: --set train.seed=3 (repeatable)."),
    click.option("--output", default=None, help="Output directory override."),
    click.option("--seeds", default=None, help="Comma-separated seed list override."),
    click.option("--epsilon", type=float, default=None, help="Bias budget override."),
    click.option("--measure", default=None, type=click.Choice(["spd", "eod", "aod"]),
                 help="Bias measure override."),
]


def friendly_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FairtuneError as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def with_common(fn):
    fn = friendly_errors(fn)
    for opt in reversed(common_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Debias trained classifiers by fine-tuning their weights."""


@main.command()
@with_common
@click.option("--seed", type=int, default=None, help="Training seed override.")
def train(config_path, sets, output, seeds, epsilon, measure, seed):
    """Train the baseline network and report validation/test metrics."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    trial_seed = seed if seed is not None else cfg.seeds[0]
    ds = cfg.dataset.load()
    train_ds, valid_ds, test_ds = harness.split_standardize(ds, cfg.split)
    out_dir = Path(cfg.output_dir)
    net = harness.train_baseline(cfg, train_ds, valid_ds, trial_seed, out_dir / "cache")
    model_path = out_dir / f"baseline_seed{trial_seed}.npz"
    save_checkpoint(net, model_path)
    payload = harness.run_method("default", net, valid_ds, test_ds,
                                 cfg.objective, cfg, trial_seed)
    write_json(out_dir / f"train_seed{trial_seed}.json",
               {"seed": trial_seed, "model": model_path.name, **payload})
    click.echo(f"model -> {model_path}")
    click.echo(f"test objective {payload['test']['objective']:.4f} "
               f"bias {payload['test']['bias']:+.4f}")


@main.command()
@with_common
@click.option("--method", required=True,
              type=click.Choice(["random", "layerwise", "adversarial", "zhang",
                                 "roc", "eqodds", "calib-eqodds"]))
@click.option("--seed", type=int, default=None, help="Trial seed override.")
def debias(config_path, sets, output, seeds, epsilon, measure, method, seed):
    """Run one debiasing method against a (cached) baseline."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    trial_seed = seed if seed is not None else cfg.seeds[0]
    ds = cfg.dataset.load()
    train_ds, valid_ds, test_ds = harness.split_standardize(ds, cfg.split)
    out_dir = Path(cfg.output_dir)
    net = harness.train_baseline(cfg, train_ds, valid_ds, trial_seed, out_dir / "cache")
    artifacts: dict = {}
    payload = harness.run_method(method, net, valid_ds, test_ds,
                                 cfg.objective, cfg, trial_seed, artifacts=artifacts)
    trace = payload.pop("trace", None)
    if trace is not None:
        write_json(out_dir / f"{method}_seed{trial_seed}_trace.json", trace)
    if "result" in artifacts:
        model_path = out_dir / f"{method}_seed{trial_seed}_model.npz"
        save_checkpoint(artifacts["result"].apply_to(net), model_path)
        payload["model"] = model_path.name
    write_json(out_dir / f"{method}_seed{trial_seed}.json",
               {"method": method, "seed": trial_seed, **payload})
    click.echo(f"{method}: test objective {payload['test']['objective']:.4f} "
               f"bias {payload['test']['bias']:+.4f}")


@main.command()
@with_common
def sweep(config_path, sets, output, seeds, epsilon, measure):
    """Run every configured (method, seed) cell and aggregate."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    result = harness.run_sweep(cfg)
    click.echo(f"wrote {Path(cfg.output_dir) / 'aggregate.json'}")
    for name, stats in result["aggregate"]["methods"].items():
        if stats.get("n_trials"):
            click.echo(
                f"{name:>14}: median objective {stats['test_objective_median']:.4f}  "
                f"bias {stats['test_bias_mean']:+.4f} +- {stats['test_bias_std']:.4f}"
            )


@main.command("variance-study")
@with_common
@click.option("--networks", type=int, default=10, show_default=True)
def variance_study(config_path, sets, output, seeds, epsilon, measure, networks):
    """Retrain with shifted seeds; report mean/std of bias and accuracy."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    result = harness.variance_study(cfg, networks=networks)
    for key, stats in result["measures"].items():
        click.echo(f"{key:>9}: {stats['mean']:+.4f} +- {stats['std']:.4f}")


@main.command("sensitivity-study")
@with_common
@click.option("--networks", type=int, default=10, show_default=True)
@click.option("--deltas", type=int, default=1000, show_default=True)
def sensitivity_study(config_path, sets, output, seeds, epsilon, measure, networks, deltas):
    """Perturb weights multiplicatively; fit linear models for bias."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    result = harness.sensitivity_study(cfg, networks=networks, deltas=deltas)
    r2 = np.array(result["r2"])
    click.echo(f"R^2 {r2.mean():.3f} +- {r2.std(ddof=1) if len(r2) > 1 else 0.0:.3f}")
    click.echo("singular values: "
               + ", ".join(f"{v:.3f}" for v in result["singular_values"]))


@main.command()
@with_common
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "valid", "test"]),
              show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
def evaluate(config_path, sets, output, seeds, epsilon, measure, model_path, split, threshold):
    """Evaluate a saved checkpoint on one split at a fixed threshold."""
    cfg = _load_config(config_path, sets, output, seeds, epsilon, measure)
    ds = cfg.dataset.load()
    parts = dict(zip(("train", "valid", "test"), harness.split_standardize(ds, cfg.split)))
    report = harness.evaluate_checkpoint(model_path, parts[split], cfg.objective, threshold)
    out_path = Path(cfg.output_dir) / f"evaluate_{split}.json"
    write_json(out_path, report.to_dict())
    click.echo(f"objective {report.objective:.4f} bias {report.bias_value:+.4f} "
               f"performance {report.performance:.4f}")


@main.command("postproc")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True),
              help="CSV with columns score,label,protected.")
@click.option("--method", required=True, type=click.Choice(["roc", "eqodds", "calib-eqodds"]))
@click.option("--epsilon", type=float, default=0.05, show_default=True)
@click.option("--measure", default="spd", type=click.Choice(["spd", "eod", "aod"]),
              show_default=True)
@click.option("--cost", default="fnr", type=click.Choice(["fnr", "fpr", "weighted"]),
              show_default=True, help="Cost for calib-eqodds.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", default="postproc_out", show_default=True)
@friendly_errors
def postproc_cmd(scores_path, method, epsilon, measure, cost, seed, output):
    """Fit a post-processing rule to a scores CSV (no model required)."""
    import pandas as pd

    df = pd.read_csv(scores_path)
    for col in ("score", "label", "protected"):
        if col not in df.columns:
            raise click.BadParameter(f"scores file lacks column {col!r}")
    scores = df["score"].to_numpy(dtype=float)
    labels = df["label"].to_numpy()
    protected = df["protected"].to_numpy()
    spec = metrics.ObjectiveSpec(measure=metrics.BiasMeasure.parse(measure), epsilon=epsilon)

    if method == "roc":
        rule = postproc.fit_reject_option(scores, labels, protected, spec)
    elif method == "eqodds":
        rule = postproc.fit_eq_odds(scores, labels, protected, seed=seed)
    else:
        rule = postproc.fit_calibrated_eq_odds(scores, labels, protected, cost=cost, seed=seed)

    preds = postproc.apply(rule, scores, protected, seed=seed)
    report = metrics.report_from_predictions(spec, labels, preds, protected,
                                             rule.base_threshold)
    out_dir = Path(output)
    write_json(out_dir / f"{method}_rule.json", json.loads(rule.to_json()))
    write_json(out_dir / f"{method}_report.json", report.to_dict())
    click.echo(f"{method}: objective {report.objective:.4f} bias {report.bias_value:+.4f}")


if __name__ == "__main__":
    main()
