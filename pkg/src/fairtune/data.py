"""Tabular datasets with a binary protected attribute.

Covers CSV ingestion driven by a small schema file, seeded
train/valid/test splitting with train-fitted standardization, a canonical
dump format for round-tripping, and a synthetic generator with a
controllable injected gap in group positive-label rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .errors import DataValidationError, GenerationError, SchemaError, SplitError

LABEL_COLUMN = "__label__"
PROTECTED_COLUMN = "__protected__"


@dataclass(frozen=True)
class DataSet:
    """Feature matrix plus binary labels and a binary protected attribute.

    The protected attribute is also one of the feature columns unless the
    loader was told to drop it.
    """

    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        # copy so freezing the arrays never touches caller-owned data
        feats = np.array(self.features, dtype=np.float64, copy=True)
        y = _binary_vector("labels", self.labels)
        a = _binary_vector("protected", self.protected)
        if feats.ndim != 2:
            raise DataValidationError("features must be a 2-d matrix")
        n, d = feats.shape
        if len(y) != n or len(a) != n:
            raise DataValidationError(
                f"labels/protected length must equal row count {n}"
            )
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != d:
            raise DataValidationError(f"expected {d} feature names, got {len(names)}")
        if not np.all(np.isfinite(feats)):
            r, c = np.argwhere(~np.isfinite(feats))[0]
            raise DataValidationError(f"non-finite feature value at row {r}, column {names[c]!r}")
        for arr in (feats, y, a):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "protected", a)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "DataSet":
        idx = np.asarray(indices)
        return DataSet(
            self.features[idx], self.labels[idx], self.protected[idx], self.feature_names
        )

    def group_class_counts(self) -> dict[tuple[int, int], int]:
        return {
            (g, c): int(np.sum((self.protected == g) & (self.labels == c)))
            for g in (0, 1)
            for c in (0, 1)
        }


def _binary_vector(name: str, values) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"{name} must be numeric 0/1: {exc}") from exc
    bad = ~((arr == 0.0) | (arr == 1.0))
    if np.any(bad):
        raise DataValidationError(f"{name} must be 0/1; found {values[int(np.argmax(bad))]!r}")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class SplitSpec:
    """Train/valid/test fractions and the shuffle seed."""

    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr):
            raise ValueError("fractions must be three non-negative reals")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(fr)}")
        object.__setattr__(self, "fractions", fr)


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for the synthetic generator.

    ``target_spd`` is the gap in positive-label rate between group 0 and
    group 1 in the emitted labels.  When ``label_noise`` is nonzero the
    pre-noise assignment rates are widened so the gap survives the flips,
    which requires ``target_spd <= 1 - 2 * label_noise``.
    """

    n: int
    d: int = 8
    target_spd: float = 0.3
    group0_fraction: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 8:
            raise GenerationError("n too small to realize both groups and classes")
        if self.d < 3:
            raise GenerationError(
                "need at least 3 features (signal + ambiguity + protected)"
            )
        if not 0.0 <= self.target_spd <= 1.0:
            raise GenerationError("target_spd must be in [0, 1]")
        if not 0.0 < self.group0_fraction < 1.0:
            raise GenerationError("group0_fraction must be in (0, 1)")
        if not 0.0 <= self.label_noise < 0.5:
            raise GenerationError("label_noise must be in [0, 0.5)")
        if self.target_spd > 1.0 - 2.0 * self.label_noise + 1e-12:
            raise GenerationError(
                f"target_spd {self.target_spd} unreachable under label_noise {self.label_noise}"
            )


# Cluster geometry for the generator.  Three regions per group: solid
# positives and easy negatives on the signal axis, plus an off-axis
# "ambiguous" cluster that both labels share.  Solid positives are equally
# frequent in the two groups; the injected label-rate gap lives entirely in
# the ambiguous cluster, whose group-0 positive fraction is placed just
# above one half.  An accuracy-trained classifier therefore sweeps the
# whole ambiguous cluster of group 0 into its positive predictions (a
# strongly biased operating point), while the balanced-accuracy-optimal
# threshold excludes the cluster for both groups, which is nearly
# bias-free.  Bias is then removable without giving up performance, the
# regime the fine-tuning methods are built for.
_SIGNAL_SEPARATION = 5.0   # solid-positive vs easy-negative cluster distance
_AMBIG_SEPARATION = 3.0    # ambiguous-cluster offset on its own axis
_GROUP_SEPARATION = 1.0
_MIN_AMBIG_POSITIVE = 0.05  # floor on the ambiguous positive rate (x rarer rate)


def generate_synthetic(spec: SyntheticSpec) -> DataSet:
    """Group-dependent Gaussian clusters with an injected label-rate gap.

    Feature layout: signal columns (shifted by the clean label), one
    ambiguity column (shifted for the ambiguous cluster), group columns
    (shifted by group membership), then the protected column itself.
    Deterministic given the spec.
    """
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n, spec.d
    a = (rng.random(n) >= spec.group0_fraction).astype(np.int64)
    w0 = spec.group0_fraction

    s = spec.target_spd
    eta = spec.label_noise
    # final rates (1 +- s)/2; pre-noise rates widened to survive the flips
    rates = {0: (1.0 + s) / 2.0, 1: (1.0 - s) / 2.0}
    clean_p = {g: (rates[g] - eta) / (1.0 - 2.0 * eta) for g in (0, 1)}
    for g, p in clean_p.items():
        if not 0.0 <= p <= 1.0:
            raise GenerationError(f"infeasible clean rate {p:.3f} for group {g}")

    # solid positives have the same rate in both groups; the rate gap is
    # carried by ambiguous positives
    q_lo = min(clean_p.values())
    ambig_pos = {g: clean_p[g] - q_lo + _MIN_AMBIG_POSITIVE * q_lo for g in (0, 1)}
    solid = {g: clean_p[g] - ambig_pos[g] for g in (0, 1)}

    # the higher-rate group's cluster gets a positive fraction between 1/2
    # and the clean prevalence (when prevalence allows); easy negatives are
    # equally frequent in both groups so everything outside the cluster is
    # group-balanced, the other cluster absorbing the remaining negatives
    prevalence = w0 * clean_p[0] + (1.0 - w0) * clean_p[1]
    target_frac = min(max(0.5 + 0.55 * (prevalence - 0.5), 0.505), 0.9)
    hi = max(ambig_pos, key=ambig_pos.get)
    lo = 1 - hi
    neg_hi = max(1.0 - clean_p[hi], 0.0)
    neg_lo = max(1.0 - clean_p[lo], 0.0)
    ambig_neg = {hi: min(ambig_pos[hi] * (1.0 - target_frac) / target_frac, neg_hi)}
    easy_mass = min(neg_hi - ambig_neg[hi], neg_lo)
    ambig_neg[lo] = neg_lo - easy_mass

    # assign components per row: 0 easy-negative, 1 ambiguous, 2 solid-positive
    u = rng.random(n)
    p_ambig = np.where(a == 0, ambig_pos[0] + ambig_neg[0], ambig_pos[1] + ambig_neg[1])
    p_solid = np.where(a == 0, solid[0], solid[1])
    in_ambig = u < p_ambig
    in_solid = ~in_ambig & (u < p_ambig + p_solid)
    # labels: solid positives 1; ambiguous rows positive with the cluster rate
    frac_pos = np.where(
        a == 0,
        ambig_pos[0] / max(ambig_pos[0] + ambig_neg[0], 1e-12),
        ambig_pos[1] / max(ambig_pos[1] + ambig_neg[1], 1e-12),
    )
    y_clean = np.where(
        in_solid, 1, np.where(in_ambig, (rng.random(n) < frac_pos).astype(np.int64), 0)
    )

    n_other = d - 2  # one column reserved for the ambiguity axis, one for protected
    n_signal = (n_other + 1) // 2
    n_group = n_other - n_signal
    if n_signal < 1:
        raise GenerationError("d too small for the cluster layout")
    shift_signal = _SIGNAL_SEPARATION / (2.0 * math.sqrt(n_signal))
    cols = []
    names = []
    signal_offset = np.where(in_ambig, 0.0, (2 * y_clean - 1) * shift_signal)
    for j in range(n_signal):
        cols.append(rng.normal(0.0, 1.0, n) + signal_offset)
        names.append(f"signal_{j}")
    cols.append(rng.normal(0.0, 1.0, n) + in_ambig * _AMBIG_SEPARATION)
    names.append("ambiguity")
    if n_group:
        shift_group = _GROUP_SEPARATION / math.sqrt(n_group)
        for j in range(n_group):
            cols.append(rng.normal(0.0, 1.0, n) + (2 * a - 1) * shift_group)
            names.append(f"group_{j}")
    cols.append(a.astype(np.float64))
    names.append("protected")

    flips = rng.random(n) < eta
    y = np.where(flips, 1 - y_clean, y_clean)

    ds = DataSet(np.column_stack(cols), y, a, tuple(names))
    counts = ds.group_class_counts()
    if any(v == 0 for v in counts.values()):
        raise GenerationError(f"n={n} too small: empty group/class cell {counts}")
    return ds


def split_standardize(ds: DataSet, spec: SplitSpec) -> tuple[DataSet, DataSet, DataSet]:
    """Disjoint covering splits by seeded shuffle, standardized on train stats.

    Continuous columns are shifted/scaled to zero mean and unit variance
    using statistics computed on the train split only.  Columns that are
    {0,1}-valued on the train split (one-hot blocks and the protected
    column) are left untouched, as are constant columns (scale forced to 1).
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(ds.n)
    f0, f1, _ = spec.fractions
    c1 = round(f0 * ds.n)
    c2 = round((f0 + f1) * ds.n)
    parts = [perm[:c1], perm[c1:c2], perm[c2:]]
    names = ("train", "valid", "test")
    for name, idx in zip(names, parts):
        if len(idx) == 0:
            raise SplitError(f"{name} split is empty; adjust fractions")
        sub_y = ds.labels[idx]
        sub_a = ds.protected[idx]
        if len(np.unique(sub_y)) < 2 or len(np.unique(sub_a)) < 2:
            raise SplitError(
                f"{name} split lacks both classes or both groups; "
                "try a different seed or fractions"
            )

    train_feats = ds.features[parts[0]]
    binary = np.all((train_feats == 0.0) | (train_feats == 1.0), axis=0)
    mean = np.where(binary, 0.0, train_feats.mean(axis=0))
    std = train_feats.std(axis=0)
    scale = np.where(binary | (std == 0.0), 1.0, std)

    out = []
    for idx in parts:
        feats = (ds.features[idx] - mean) / scale
        out.append(DataSet(feats, ds.labels[idx], ds.protected[idx], ds.feature_names))
    return tuple(out)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnRule:
    """How to turn one raw column into a 0/1 vector.

    Exactly one of ``mapping`` or ``greater_than`` applies; with neither,
    the column must already be 0/1.
    """

    column: str
    mapping: dict | None = None
    greater_than: float | None = None


@dataclass(frozen=True)
class Schema:
    """Column roles for a CSV file."""

    label: ColumnRule
    protected: ColumnRule
    categorical: dict[str, list | None] = field(default_factory=dict)
    drop: tuple[str, ...] = ()
    drop_unmapped_rows: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "Schema":
        def rule(key: str) -> ColumnRule:
            node = raw.get(key)
            if node is None:
                raise SchemaError(f"schema is missing the '{key}' section")
            if isinstance(node, str):
                return ColumnRule(column=node)
            return ColumnRule(
                column=node["column"],
                mapping=node.get("map"),
                greater_than=node.get("greater_than"),
            )

        cat_node = raw.get("categorical", []) or []
        if isinstance(cat_node, dict):
            categorical = {str(k): list(v) if v else None for k, v in cat_node.items()}
        else:
            categorical = {str(c): None for c in cat_node}
        return cls(
            label=rule("label"),
            protected=rule("protected"),
            categorical=categorical,
            drop=tuple(raw.get("drop", []) or []),
            drop_unmapped_rows=bool(raw.get("drop_unmapped_rows", False)),
        )


def load_schema(path) -> Schema:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise SchemaError(f"schema file {path} is not a mapping")
    return Schema.from_dict(raw)


def _apply_rule(df: pd.DataFrame, rule: ColumnRule, role: str, drop_unmapped: bool):
    """Returns (series aligned to df.index, keep-row mask)."""
    if rule.column not in df.columns:
        raise SchemaError(f"{role} column {rule.column!r} not present in file")
    col = df[rule.column]
    keep = pd.Series(True, index=df.index)
    if rule.mapping is not None:
        as_str = col.astype(str).str.strip()
        mapping = {str(k).strip(): int(v) for k, v in rule.mapping.items()}
        values = as_str.map(mapping)
        if values.isna().any():
            if not drop_unmapped:
                offender = as_str[values.isna()].iloc[0]
                raise DataValidationError(
                    f"{role} column {rule.column!r} has unmapped value {offender!r}"
                )
            keep = ~values.isna()
    elif rule.greater_than is not None:
        numeric = pd.to_numeric(col, errors="coerce")
        if numeric.isna().any():
            row = int(numeric.index[numeric.isna()][0])
            raise DataValidationError(
                f"{role} column {rule.column!r}: unparseable value at row {row}"
            )
        values = (numeric > rule.greater_than).astype(np.int64)
    else:
        numeric = pd.to_numeric(col, errors="coerce")
        bad = numeric.isna() | ~numeric.isin((0, 1))
        if bad.any():
            offender = col[bad].iloc[0]
            raise DataValidationError(
                f"{role} column {rule.column!r} must be binary; found {offender!r}"
            )
        values = numeric
    return values, keep


def load_csv(path, schema: Schema, drop_protected_feature: bool = False) -> DataSet:
    """Load a CSV per its schema: binary label/protected, one-hot categoricals.

    The protected column is kept inside the feature matrix (as its mapped
    0/1 value) and exposed as the protected vector; pass
    ``drop_protected_feature=True`` to exclude it from the features.
    One-hot encoding uses the full category set observed in the file (or
    the set enumerated in the schema; values outside that set encode as
    all-zeros).  Row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    df = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")

    for c in (schema.label.column, schema.protected.column, *schema.categorical, *schema.drop):
        if c not in df.columns:
            raise SchemaError(f"schema column {c!r} not present in file")

    labels_s, keep_l = _apply_rule(df, schema.label, "label", schema.drop_unmapped_rows)
    protected_s, keep_p = _apply_rule(df, schema.protected, "protected", schema.drop_unmapped_rows)
    keep = keep_l & keep_p
    df = df.loc[keep]
    labels = labels_s.loc[keep].astype(np.int64)
    protected = protected_s.loc[keep].astype(np.int64)

    feature_df = df.drop(columns=[schema.label.column, *schema.drop])
    feature_df = feature_df.assign(**{schema.protected.column: protected})
    if drop_protected_feature:
        feature_df = feature_df.drop(columns=[schema.protected.column])

    blocks = []
    names: list[str] = []
    for col in feature_df.columns:
        if col in schema.categorical:
            raw = feature_df[col].astype(str).str.strip()
            cats = schema.categorical[col]
            if cats is None:
                cats = sorted(raw.unique())
            for cat in cats:
                blocks.append((raw == str(cat)).to_numpy(dtype=np.float64))
                names.append(f"{col}={cat}")
        else:
            numeric = pd.to_numeric(feature_df[col], errors="coerce")
            if numeric.isna().any():
                row = int(numeric.index[numeric.isna()][0])
                raise DataValidationError(
                    f"column {col!r}: unparseable value at row {row}"
                )
            blocks.append(numeric.to_numpy(dtype=np.float64))
            names.append(str(col))

    return DataSet(
        np.column_stack(blocks),
        labels.to_numpy(),
        protected.to_numpy(),
        tuple(names),
    )


# ---------------------------------------------------------------------------
# Canonical dump format
# ---------------------------------------------------------------------------

def save_dump(ds: DataSet, path) -> None:
    """Write the canonical CSV dump (reserved __label__/__protected__ columns)."""
    df = pd.DataFrame(np.asarray(ds.features), columns=list(ds.feature_names))
    df[LABEL_COLUMN] = ds.labels
    df[PROTECTED_COLUMN] = ds.protected
    df.to_csv(path, index=False)


def load_dump(path) -> DataSet:
    """Read a canonical dump back; exact float round-trip."""
    df = pd.read_csv(path, float_precision="round_trip")
    for col in (LABEL_COLUMN, PROTECTED_COLUMN):
        if col not in df.columns:
            raise SchemaError(f"dump file lacks reserved column {col!r}")
    feature_cols = [c for c in df.columns if c not in (LABEL_COLUMN, PROTECTED_COLUMN)]
    return DataSet(
        df[feature_cols].to_numpy(dtype=np.float64),
        df[LABEL_COLUMN].to_numpy(),
        df[PROTECTED_COLUMN].to_numpy(),
        tuple(feature_cols),
    )
