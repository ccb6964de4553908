"""Post-processing baselines operating on (scores, labels, protected) only.

Three rules: reject-option banding around the decision threshold,
equalized-odds prediction flipping, and calibrated equalized-odds score
mixing.  Fitting sees labels; applying a rule never does.  Randomized
rules draw from an explicit seed so applications are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import metrics
from .errors import DataValidationError, UndefinedRateError
from .metrics import BiasMeasure, ObjectiveSpec

KINDS = ("reject_option", "eq_odds", "calibrated_eq_odds")


@dataclass(frozen=True)
class PostprocRule:
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PostprocRule":
        raw = json.loads(text)
        return cls(kind=raw["kind"], params=raw["params"])

    @property
    def base_threshold(self) -> float:
        return float(self.params["threshold"])


def _validate_inputs(scores, protected):
    s = np.asarray(scores, dtype=np.float64)
    a = np.asarray(protected)
    if s.shape != a.shape:
        raise DataValidationError("scores and protected must have equal length")
    af = a.astype(np.float64)
    bad = ~((af == 0.0) | (af == 1.0))
    if np.any(bad):
        raise DataValidationError(f"protected must be 0/1; found {a[int(np.argmax(bad))]!r}")
    return s, af.astype(np.int64)


# ---------------------------------------------------------------------------
# Reject option
# ---------------------------------------------------------------------------

def fit_reject_option(scores, labels, protected, spec: ObjectiveSpec,
                      unprivileged: int = 1) -> PostprocRule:
    """Grid-search a critical band around the decision threshold.

    Inside the band [threshold - w, threshold + w] unprivileged-group
    predictions are forced to 1 and privileged-group predictions to 0;
    outside, plain thresholding applies.  The search maximizes the
    objective over halfwidths {0, 0.01, ..., 0.5} and thresholds
    {0.01, ..., 0.99}; ties prefer smaller |bias|, higher balanced
    accuracy, then smaller halfwidth and threshold.
    """
    s, a = _validate_inputs(scores, protected)
    y = np.asarray(labels)
    unpriv_mask = a == unprivileged

    best_key = None
    best = None
    for w in np.round(np.arange(0.0, 0.5001, 0.01), 10):
        for tau in np.round(np.arange(0.01, 0.9901, 0.01), 10):
            preds = _reject_predict(s, unpriv_mask, tau, w)
            mu = metrics.bias(spec.measure, y, preds, a)
            rho = metrics.balanced_accuracy(y, preds)
            phi = rho if abs(mu) < spec.epsilon else 0.0
            key = (-phi, abs(mu), -rho, w, tau)
            if best_key is None or key < best_key:
                best_key = key
                best = (tau, w)

    tau, w = best
    return PostprocRule(
        kind="reject_option",
        params={"threshold": float(tau), "halfwidth": float(w),
                "unprivileged": int(unprivileged)},
    )


def _reject_predict(s: np.ndarray, unpriv_mask: np.ndarray, tau: float, w: float) -> np.ndarray:
    preds = (s > tau).astype(np.int64)
    if w > 0.0:
        in_band = (s >= tau - w) & (s <= tau + w)
        preds = np.where(in_band, unpriv_mask.astype(np.int64), preds)
    return preds


# ---------------------------------------------------------------------------
# Equalized odds
# ---------------------------------------------------------------------------

def fit_eq_odds(scores, labels, protected, seed: int = 0, tolerance: float = 1e-2,
                grid_step: float = 0.02, threshold: float = 0.5) -> PostprocRule:
    """Per-(group, predicted class) flip probabilities equalizing TPR and FPR.

    Finds flip probabilities in a dense grid minimizing expected
    misclassifications subject to the expected TPR and FPR gaps staying
    within ``tolerance``; if nothing in the grid is feasible the rule with
    the smallest violation is returned and flagged.  Ties prefer fewer
    expected flips, so an already-fair instance yields the identity rule.
    """
    s, a = _validate_inputs(scores, protected)
    y = np.asarray(labels)
    base = (s > threshold).astype(np.int64)
    gr = metrics.group_rates(y, base, a)
    for g in (0, 1):
        if gr.positives(g) == 0:
            raise UndefinedRateError("TPR", g)
        if gr.negatives(g) == 0:
            raise UndefinedRateError("FPR", g)

    grid = np.round(np.arange(0.0, 1.0 + grid_step / 2, grid_step), 10)
    # per group: all (p_flip_when_0, p_flip_when_1) pairs and resulting rates
    p0g, p1g = np.meshgrid(grid, grid, indexing="ij")
    p0 = p0g.ravel()
    p1 = p1g.ravel()

    def group_tables(g: int):
        tpr, fpr = gr.tpr(g), gr.fpr(g)
        npos, nneg = gr.positives(g), gr.negatives(g)
        tpr_new = tpr * (1.0 - p1) + (1.0 - tpr) * p0
        fpr_new = fpr * (1.0 - p1) + (1.0 - fpr) * p0
        err = npos * (1.0 - tpr_new) + nneg * fpr_new
        return tpr_new, fpr_new, err

    tpr0, fpr0, err0 = group_tables(0)
    tpr1, fpr1, err1 = group_tables(1)
    sum_p = p0 + p1

    best_key = None
    best_idx = None
    for i in range(len(p0)):
        # keys rounded so algebraically tied cells compare equal and the
        # fewest-expected-flips tie-break decides
        excess = np.round(np.maximum(
            np.maximum(np.abs(tpr0[i] - tpr1), np.abs(fpr0[i] - fpr1)) - tolerance, 0.0
        ), 9)
        cost = np.round(err0[i] + err1, 9)
        total_p = np.round(sum_p[i] + sum_p, 9)
        j = int(np.lexsort((total_p, cost, excess))[0])
        key = (excess[j], cost[j], total_p[j], i, j)
        if best_key is None or key < best_key:
            best_key = key
            best_idx = (i, j)

    i, j = best_idx
    feasible = bool(best_key[0] <= 0.0)
    return PostprocRule(
        kind="eq_odds",
        params={
            "threshold": float(threshold),
            "flip_0_when_0": float(p0[i]), "flip_0_when_1": float(p1[i]),
            "flip_1_when_0": float(p0[j]), "flip_1_when_1": float(p1[j]),
            "feasible": feasible,
            "tolerance": float(tolerance),
        },
    )


def expected_eq_odds_rates(rule: PostprocRule, tpr: float, fpr: float, group: int):
    """Closed-form expected (TPR, FPR) of a group after applying the rule."""
    p0 = rule.params[f"flip_{group}_when_0"]
    p1 = rule.params[f"flip_{group}_when_1"]
    return (
        tpr * (1.0 - p1) + (1.0 - tpr) * p0,
        fpr * (1.0 - p1) + (1.0 - fpr) * p0,
    )


# ---------------------------------------------------------------------------
# Calibrated equalized odds
# ---------------------------------------------------------------------------

_COSTS = ("fnr", "fpr", "weighted")


def generalized_cost(scores, labels, cost: str) -> float:
    """Score-weighted error cost of calibrated scores against labels."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if cost == "fnr":
        if not np.any(y == 1):
            raise UndefinedRateError("generalized FNR")
        return float(np.mean(1.0 - s[y == 1]))
    if cost == "fpr":
        if not np.any(y == 0):
            raise UndefinedRateError("generalized FPR")
        return float(np.mean(s[y == 0]))
    return float(np.mean(y * (1.0 - s) + (1.0 - y) * s))


def _trivial_cost(base_rate: float, cost: str) -> float:
    if cost == "fnr":
        return 1.0 - base_rate
    if cost == "fpr":
        return base_rate
    return 2.0 * base_rate * (1.0 - base_rate)


def fit_calibrated_eq_odds(scores, labels, protected, cost: str = "fnr",
                           seed: int = 0, threshold: float = 0.5) -> PostprocRule:
    """Mix the cheaper group's scores toward its base rate until costs meet.

    The mixing probability is the closed-form linear interpolation
    (other cost - own cost) / (trivial cost - own cost); equal costs give
    the identity rule.
    """
    if cost not in _COSTS:
        raise ValueError(f"cost must be one of {_COSTS}")
    s, a = _validate_inputs(scores, protected)
    y = np.asarray(labels, dtype=np.float64)

    base_rate = {}
    group_cost = {}
    for g in (0, 1):
        m = a == g
        if not np.any(m):
            raise UndefinedRateError("base rate", g)
        base_rate[g] = float(np.mean(y[m]))
        group_cost[g] = generalized_cost(s[m], y[m], cost)

    mix = {0: 0.0, 1: 0.0}
    degenerate = False
    if group_cost[0] != group_cost[1]:
        low = 0 if group_cost[0] < group_cost[1] else 1
        other = 1 - low
        denom = _trivial_cost(base_rate[low], cost) - group_cost[low]
        if denom <= 1e-12:
            degenerate = True
        else:
            mix[low] = float(np.clip((group_cost[other] - group_cost[low]) / denom, 0.0, 1.0))

    return PostprocRule(
        kind="calibrated_eq_odds",
        params={
            "threshold": float(threshold),
            "cost": cost,
            "mix_0": mix[0], "mix_1": mix[1],
            "base_rate_0": base_rate[0], "base_rate_1": base_rate[1],
            "degenerate": degenerate,
        },
    )


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def apply(rule: PostprocRule, scores, protected, seed: int = 0) -> np.ndarray:
    """Binary predictions from a fitted rule; labels are never consulted.

    Deterministic given the seed; each example consumes one draw from the
    seeded stream for randomized rules.
    """
    s, a = _validate_inputs(scores, protected)
    if rule.kind == "reject_option":
        unpriv = a == int(rule.params["unprivileged"])
        return _reject_predict(s, unpriv, rule.params["threshold"], rule.params["halfwidth"])

    rng = np.random.default_rng(seed)
    if rule.kind == "eq_odds":
        base = (s > rule.params["threshold"]).astype(np.int64)
        flip_prob = np.empty(len(s))
        for g in (0, 1):
            for pred in (0, 1):
                m = (a == g) & (base == pred)
                flip_prob[m] = rule.params[f"flip_{g}_when_{pred}"]
        flips = rng.random(len(s)) < flip_prob
        return np.where(flips, 1 - base, base)

    # calibrated_eq_odds
    mixed = s.copy()
    u = rng.random(len(s))
    for g in (0, 1):
        p = rule.params[f"mix_{g}"]
        if p > 0.0:
            m = (a == g) & (u < p)
            mixed[m] = rule.params[f"base_rate_{g}"]
    return (mixed > rule.params["threshold"]).astype(np.int64)
