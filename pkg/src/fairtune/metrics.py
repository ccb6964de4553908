"""Group-fairness measures, balanced accuracy, the constrained objective, and
decision-threshold selection.

All measures operate on three equal-length arrays: binary true labels,
binary predictions, and a binary protected-group indicator.  Bias values are
kept signed (group 0 minus group 1); the objective applies the absolute
value when testing the constraint.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedPerformanceError, UndefinedRateError


class BiasMeasure(enum.Enum):
    """The three supported group-fairness measures.

    SPD: gap in positive-prediction rate between groups 0 and 1.
    EOD: gap in true-positive rate.
    AOD: mean of the false-positive-rate gap and the true-positive-rate gap.
    """

    SPD = "spd"
    EOD = "eod"
    AOD = "aod"

    @classmethod
    def parse(cls, name: str | "BiasMeasure") -> "BiasMeasure":
        if isinstance(name, cls):
            return name
        return cls(str(name).strip().lower())


@dataclass(frozen=True)
class ObjectiveSpec:
    """Constrained objective: balanced accuracy if |bias| < epsilon, else 0."""

    measure: BiasMeasure = BiasMeasure.SPD
    epsilon: float = 0.05
    performance: str = "balanced_accuracy"

    def __post_init__(self):
        object.__setattr__(self, "measure", BiasMeasure.parse(self.measure))
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.performance != "balanced_accuracy":
            raise ValueError("only balanced_accuracy is supported")

    def to_dict(self) -> dict:
        return {
            "measure": self.measure.value,
            "epsilon": self.epsilon,
            "performance": self.performance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(
            measure=BiasMeasure.parse(d["measure"]),
            epsilon=float(d["epsilon"]),
            performance=d.get("performance", "balanced_accuracy"),
        )


@dataclass(frozen=True)
class GroupRates:
    """Per-group confusion counts and the rates derived from them.

    Rates whose conditioning set is empty are stored as NaN; the accessor
    methods raise :class:`UndefinedRateError` instead of returning NaN so a
    degenerate split can never silently read as fair.
    """

    tp: tuple[int, int]
    fp: tuple[int, int]
    tn: tuple[int, int]
    fn: tuple[int, int]

    @classmethod
    def from_arrays(cls, labels, predictions, protected) -> "GroupRates":
        y, yhat, a = _validate_triplet(labels, predictions, protected)
        tp, fp, tn, fn = [], [], [], []
        for g in (0, 1):
            m = a == g
            tp.append(int(np.sum((yhat == 1) & (y == 1) & m)))
            fp.append(int(np.sum((yhat == 1) & (y == 0) & m)))
            tn.append(int(np.sum((yhat == 0) & (y == 0) & m)))
            fn.append(int(np.sum((yhat == 0) & (y == 1) & m)))
        return cls(tuple(tp), tuple(fp), tuple(tn), tuple(fn))

    def group_size(self, group: int) -> int:
        return self.tp[group] + self.fp[group] + self.tn[group] + self.fn[group]

    def positives(self, group: int) -> int:
        return self.tp[group] + self.fn[group]

    def negatives(self, group: int) -> int:
        return self.fp[group] + self.tn[group]

    def tpr(self, group: int) -> float:
        if self.positives(group) == 0:
            raise UndefinedRateError("TPR", group)
        return self.tp[group] / self.positives(group)

    def fnr(self, group: int) -> float:
        if self.positives(group) == 0:
            raise UndefinedRateError("FNR", group)
        return self.fn[group] / self.positives(group)

    def fpr(self, group: int) -> float:
        if self.negatives(group) == 0:
            raise UndefinedRateError("FPR", group)
        return self.fp[group] / self.negatives(group)

    def tnr(self, group: int) -> float:
        if self.negatives(group) == 0:
            raise UndefinedRateError("TNR", group)
        return self.tn[group] / self.negatives(group)

    def positive_prediction_rate(self, group: int) -> float:
        n = self.group_size(group)
        if n == 0:
            raise UndefinedRateError("positive prediction rate", group)
        return (self.tp[group] + self.fp[group]) / n

    def _rate_or_nan(self, fn) -> float:
        try:
            return fn()
        except UndefinedRateError:
            return math.nan

    def to_dict(self) -> dict:
        d: dict = {}
        for g in (0, 1):
            d[f"group{g}"] = {
                "tp": self.tp[g],
                "fp": self.fp[g],
                "tn": self.tn[g],
                "fn": self.fn[g],
                "tpr": self._rate_or_nan(lambda: self.tpr(g)),
                "fpr": self._rate_or_nan(lambda: self.fpr(g)),
                "tnr": self._rate_or_nan(lambda: self.tnr(g)),
                "fnr": self._rate_or_nan(lambda: self.fnr(g)),
            }
        return d


@dataclass(frozen=True)
class EvalReport:
    """Everything measured about one (predictions, threshold) pair."""

    bias_value: float
    performance: float
    objective: float
    threshold: float
    group_rates: GroupRates
    measure: str
    epsilon: float

    def to_dict(self) -> dict:
        return {
            "bias": self.bias_value,
            "performance": self.performance,
            "objective": self.objective,
            "threshold": self.threshold,
            "measure": self.measure,
            "epsilon": self.epsilon,
            "group_rates": self.group_rates.to_dict(),
        }


def _as_binary(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.dtype == bool:
        return arr.astype(np.int64)
    flt = arr.astype(np.float64)
    bad = ~((flt == 0.0) | (flt == 1.0))
    if np.any(bad):
        raise ValueError(f"{name} must be binary; found value {arr[np.argmax(bad)]!r}")
    return flt.astype(np.int64)


def _validate_triplet(labels, predictions, protected):
    y = _as_binary("labels", labels)
    yhat = _as_binary("predictions", predictions)
    a = _as_binary("protected", protected)
    if not len(y) == len(yhat) == len(a):
        raise ValueError(
            f"length mismatch: labels {len(y)}, predictions {len(yhat)}, protected {len(a)}"
        )
    return y, yhat, a


def group_rates(labels, predictions, protected) -> GroupRates:
    """Confusion counts and TPR/FPR/TNR/FNR per protected group.

    Denominators are group-conditional (a group's TPR divides by that
    group's positives), i.e. the conditional-probability reading of the
    rates.  Rates conditioned on an empty set come back NaN in ``to_dict``
    and raise through the accessors.
    """
    return GroupRates.from_arrays(labels, predictions, protected)


def bias(measure: BiasMeasure | str, labels, predictions, protected) -> float:
    """Signed bias of binary predictions: group 0 rate minus group 1 rate."""
    measure = BiasMeasure.parse(measure)
    gr = GroupRates.from_arrays(labels, predictions, protected)
    if measure is BiasMeasure.SPD:
        return gr.positive_prediction_rate(0) - gr.positive_prediction_rate(1)
    if measure is BiasMeasure.EOD:
        return gr.tpr(0) - gr.tpr(1)
    return ((gr.fpr(0) - gr.fpr(1)) + (gr.tpr(0) - gr.tpr(1))) / 2.0


def balanced_accuracy(labels, predictions) -> float:
    """(TPR + TNR) / 2 over the whole dataset."""
    y = _as_binary("labels", labels)
    yhat = _as_binary("predictions", predictions)
    if len(y) != len(yhat):
        raise ValueError("labels and predictions differ in length")
    npos = int(np.sum(y == 1))
    nneg = int(np.sum(y == 0))
    if npos == 0 or nneg == 0:
        raise UndefinedPerformanceError("labels contain a single class")
    tpr = int(np.sum((yhat == 1) & (y == 1))) / npos
    tnr = int(np.sum((yhat == 0) & (y == 0))) / nneg
    return (tpr + tnr) / 2.0


def accuracy(labels, predictions) -> float:
    """Plain fraction of correct predictions."""
    y = _as_binary("labels", labels)
    yhat = _as_binary("predictions", predictions)
    if len(y) != len(yhat):
        raise ValueError("labels and predictions differ in length")
    return float(np.mean(y == yhat))


def objective(spec: ObjectiveSpec, labels, predictions, protected) -> float:
    """Balanced accuracy if |bias| < epsilon, else exactly 0 (strict test)."""
    mu = bias(spec.measure, labels, predictions, protected)
    rho = balanced_accuracy(labels, predictions)
    return rho if abs(mu) < spec.epsilon else 0.0


def report_from_predictions(spec: ObjectiveSpec, labels, predictions, protected,
                            threshold: float) -> EvalReport:
    """Full report for already-binarized predictions (threshold is informational)."""
    mu = bias(spec.measure, labels, predictions, protected)
    rho = balanced_accuracy(labels, predictions)
    phi = rho if abs(mu) < spec.epsilon else 0.0
    gr = GroupRates.from_arrays(labels, predictions, protected)
    return EvalReport(
        bias_value=mu,
        performance=rho,
        objective=phi,
        threshold=float(threshold),
        group_rates=gr,
        measure=spec.measure.value,
        epsilon=spec.epsilon,
    )


def evaluate(spec: ObjectiveSpec, labels, scores, protected, threshold: float) -> EvalReport:
    """Binarize scores at ``threshold`` (prediction = score > threshold) and report."""
    scores = np.asarray(scores, dtype=np.float64)
    preds = (scores > threshold).astype(np.int64)
    return report_from_predictions(spec, labels, preds, protected, threshold)


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """{0, 1} plus midpoints between consecutive distinct sorted scores.

    Predictions are ``score > tau``, so this candidate set realizes every
    achievable binarization of the scores.
    """
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate(([0.0], mids, [1.0]))


def _sweep(spec: ObjectiveSpec, labels, scores, protected):
    """Evaluate phi, bias, and balanced accuracy at every candidate threshold.

    Counting is done with integer suffix sums over the score order, so every
    rate is the exact same int/int division a naive per-threshold count
    would produce.
    """
    y = _as_binary("labels", labels)
    a = _as_binary("protected", protected)
    scores = np.asarray(scores, dtype=np.float64)
    if not len(y) == len(a) == len(scores):
        raise ValueError("labels, scores, and protected differ in length")
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("scores must lie in [0, 1]")

    n = len(y)
    npos = int(np.sum(y == 1))
    nneg = n - npos
    n_g = np.array([int(np.sum(a == 0)), int(np.sum(a == 1))])
    npos_g = np.array([int(np.sum((a == 0) & (y == 1))), int(np.sum((a == 1) & (y == 1)))])
    nneg_g = n_g - npos_g

    if npos == 0 or nneg == 0:
        raise UndefinedPerformanceError("labels contain a single class")
    if n_g[0] == 0 or n_g[1] == 0:
        raise UndefinedRateError("positive prediction rate", int(n_g[0] > 0))
    if spec.measure in (BiasMeasure.EOD, BiasMeasure.AOD) and np.any(npos_g == 0):
        raise UndefinedRateError("TPR", int(np.argmin(npos_g)))
    if spec.measure is BiasMeasure.AOD and np.any(nneg_g == 0):
        raise UndefinedRateError("FPR", int(np.argmin(nneg_g)))

    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    taus = threshold_candidates(scores)
    # index of the first score strictly greater than each candidate
    starts = np.searchsorted(s_sorted, taus, side="right")

    def pred_pos(mask: np.ndarray) -> np.ndarray:
        # number of mask members predicted positive (score > tau), per candidate
        prefix = np.concatenate(([0], np.cumsum(mask[order].astype(np.int64))))
        return int(prefix[-1]) - prefix[starts]

    pp_g0 = pred_pos(a == 0)
    pp_g1 = pred_pos(a == 1)
    tp_g0 = pred_pos((a == 0) & (y == 1))
    tp_g1 = pred_pos((a == 1) & (y == 1))
    fp_g0 = pp_g0 - tp_g0
    fp_g1 = pp_g1 - tp_g1
    tp = tp_g0 + tp_g1
    fp = fp_g0 + fp_g1

    tpr_all = tp / npos
    tnr_all = (nneg - fp) / nneg
    rho = (tpr_all + tnr_all) / 2.0

    if spec.measure is BiasMeasure.SPD:
        mu = pp_g0 / n_g[0] - pp_g1 / n_g[1]
    elif spec.measure is BiasMeasure.EOD:
        mu = tp_g0 / npos_g[0] - tp_g1 / npos_g[1]
    else:
        mu = ((fp_g0 / nneg_g[0] - fp_g1 / nneg_g[1]) + (tp_g0 / npos_g[0] - tp_g1 / npos_g[1])) / 2.0

    phi = np.where(np.abs(mu) < spec.epsilon, rho, 0.0)
    return taus, phi, mu, rho


def select_threshold(spec: ObjectiveSpec, labels, scores, protected) -> tuple[float, float]:
    """Threshold maximizing the objective over every achievable binarization.

    Ties are broken by smaller |bias|, then higher balanced accuracy, then
    smaller threshold.  Returns ``(tau, phi)``.  Undefined constituent
    rates depend only on label/group cells, never on the threshold, so a
    degenerate input raises up front instead of skipping candidates.
    """
    taus, phi, mu, rho = _sweep(spec, labels, scores, protected)
    best = np.lexsort((taus, -rho, np.abs(mu), -phi))[0]
    return float(taus[best]), float(phi[best])
