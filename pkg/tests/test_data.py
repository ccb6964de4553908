import os

import numpy as np
import pytest

from fairtune import data
from fairtune.data import (
    ColumnRule,
    DataSet,
    Schema,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    load_dump,
    load_schema,
    save_dump,
    split_standardize,
)
from fairtune.errors import DataValidationError, GenerationError, SchemaError, SplitError


INCOME_SCHEMA = Schema(
    label=ColumnRule("income", mapping={">50K": 1, "<=50K": 0}),
    protected=ColumnRule("sex", mapping={"Female": 0, "Male": 1}),
    categorical={"job": None},
)


def write_csv(path, text):
    path.write_text(text.strip() + "\n", encoding="utf-8")
    return path


class TestLoadCsv:
    def test_label_mapping(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,farm,Female,<=50K
52,tech,Female,<=50K
41,farm,Male,>50K
""")
        ds = load_csv(p, INCOME_SCHEMA)
        assert ds.labels.tolist() == [1, 0, 0, 1]
        assert ds.protected.tolist() == [1, 0, 0, 1]

    def test_protected_kept_as_feature(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,farm,Female,<=50K
52,tech,Female,<=50K
41,farm,Male,>50K
""")
        ds = load_csv(p, INCOME_SCHEMA)
        assert "sex" in ds.feature_names
        col = ds.features[:, ds.feature_names.index("sex")]
        assert col.tolist() == [1.0, 0.0, 0.0, 1.0]
        dropped = load_csv(p, INCOME_SCHEMA, drop_protected_feature=True)
        assert "sex" not in dropped.feature_names
        assert dropped.protected.tolist() == [1, 0, 0, 1]

    def test_one_hot_encoding(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,farm,Female,<=50K
52,arts,Female,<=50K
41,farm,Male,>50K
""")
        ds = load_csv(p, INCOME_SCHEMA)
        for cat in ("arts", "farm", "tech"):
            assert f"job={cat}" in ds.feature_names
        block = ds.features[:, [ds.feature_names.index(f"job={c}") for c in ("arts", "farm", "tech")]]
        assert block.sum(axis=1).tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_enumerated_categories_unseen_all_zero(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,other,Female,<=50K
52,farm,Female,<=50K
41,farm,Male,>50K
""")
        schema = Schema(
            label=INCOME_SCHEMA.label,
            protected=INCOME_SCHEMA.protected,
            categorical={"job": ["tech", "farm"]},
        )
        ds = load_csv(p, schema)
        block = ds.features[:, [ds.feature_names.index("job=tech"), ds.feature_names.index("job=farm")]]
        assert block[1].tolist() == [0.0, 0.0]

    def test_three_valued_protected_rejected(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,farm,Female,<=50K
52,tech,Other,<=50K
41,farm,Male,>50K
""")
        with pytest.raises(DataValidationError, match="Other"):
            load_csv(p, INCOME_SCHEMA)

    def test_drop_unmapped_rows(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
38,farm,Female,<=50K
52,tech,Other,<=50K
41,farm,Male,>50K
""")
        schema = Schema(
            label=INCOME_SCHEMA.label,
            protected=INCOME_SCHEMA.protected,
            categorical={"job": None},
            drop_unmapped_rows=True,
        )
        ds = load_csv(p, schema)
        assert ds.n == 3

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "age,income\n25,>50K")
        with pytest.raises(SchemaError, match="sex"):
            load_csv(p, INCOME_SCHEMA)

    def test_unparseable_row_reports_index(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,job,sex,income
25,tech,Male,>50K
xx,farm,Female,<=50K
52,tech,Female,<=50K
41,farm,Male,>50K
""")
        with pytest.raises(DataValidationError, match="row 1"):
            load_csv(p, INCOME_SCHEMA)

    def test_threshold_rule(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", """
age,score,label
30,0.5,1
20,0.2,0
45,0.8,1
22,0.1,0
""")
        schema = Schema(
            label=ColumnRule("label"),
            protected=ColumnRule("age", greater_than=25),
        )
        ds = load_csv(p, schema)
        assert ds.protected.tolist() == [1, 0, 1, 0]

    def test_adult_csv_shape(self):
        path = os.environ.get("FAIRTUNE_ADULT_CSV")
        if not path or not os.path.exists(path):
            pytest.skip("set FAIRTUNE_ADULT_CSV to run")
        ds = load_csv(path, load_schema("schemas/adult.yaml"))
        assert ds.n > 40000
        assert ds.d >= 15

    def test_schema_file_roundtrip(self, tmp_path):
        text = """
label:
  column: income
  map: {">50K": 1, "<=50K": 0}
protected:
  column: sex
  map: {Female: 0, Male: 1}
categorical: [job]
"""
        schema_path = tmp_path / "schema.yaml"
        schema_path.write_text(text, encoding="utf-8")
        schema = load_schema(schema_path)
        assert schema.label.column == "income"
        assert schema.protected.mapping == {"Female": 0, "Male": 1}
        assert "job" in schema.categorical


class TestSplitStandardize:
    def _dataset(self, n=10, seed=0):
        rng = np.random.default_rng(seed)
        feats = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n).astype(float)])
        labels = rng.integers(0, 2, n)
        protected = feats[:, 1].astype(int)
        return DataSet(feats, labels, protected, ("x", "protected"))

    def test_split_sizes(self):
        # labels/groups arranged so some seed yields valid (6, 2, 2) parts
        feats = np.arange(10, dtype=float).reshape(-1, 1)
        labels = np.tile([0, 1], 5)
        protected = np.tile([0, 1], 5)
        ds = DataSet(feats, labels, protected, ("x",))
        for seed in range(50):
            try:
                tr, va, te = split_standardize(ds, SplitSpec(fractions=(0.6, 0.2, 0.2), seed=seed))
                break
            except SplitError:
                continue
        else:
            pytest.fail("no valid seed found")
        assert (tr.n, va.n, te.n) == (6, 2, 2)

    def test_same_seed_identical(self):
        ds = generate_synthetic(SyntheticSpec(n=200, d=4, seed=1))
        a = split_standardize(ds, SplitSpec(seed=9))
        b = split_standardize(ds, SplitSpec(seed=9))
        for x, y in zip(a, b):
            assert np.array_equal(x.features, y.features)
            assert np.array_equal(x.labels, y.labels)

    def test_standardization_stats(self):
        ds = generate_synthetic(SyntheticSpec(n=2000, d=6, seed=2))
        tr, _, _ = split_standardize(ds, SplitSpec(seed=3))
        binary = np.all((tr.features == 0) | (tr.features == 1), axis=0)
        cont = tr.features[:, ~binary]
        assert np.all(np.abs(cont.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(cont.std(axis=0) - 1.0) < 1e-9)

    def test_binary_columns_untouched(self):
        ds = generate_synthetic(SyntheticSpec(n=500, d=4, seed=2))
        tr, va, te = split_standardize(ds, SplitSpec(seed=3))
        j = ds.feature_names.index("protected")
        for part in (tr, va, te):
            assert set(np.unique(part.features[:, j])) <= {0.0, 1.0}

    def test_constant_column_scale_one(self):
        n = 40
        feats = np.column_stack([np.full(n, 7.0), np.arange(n, dtype=float)])
        labels = np.tile([0, 1], n // 2)
        protected = np.tile([0, 0, 1, 1], n // 4)
        ds = DataSet(feats, labels, protected, ("const", "x"))
        tr, va, te = split_standardize(ds, SplitSpec(seed=1))
        # constant column: centered but not scaled (scale forced to 1)
        assert np.allclose(tr.features[:, 0], 0.0)
        assert np.all(np.isfinite(tr.features))

    def test_degenerate_split_raises(self):
        feats = np.arange(8, dtype=float).reshape(-1, 1)
        labels = np.array([1, 1, 1, 1, 1, 1, 1, 0])
        protected = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        ds = DataSet(feats, labels, protected, ("x",))
        with pytest.raises(SplitError):
            # only one negative: most splits leave a single-class part
            split_standardize(ds, SplitSpec(fractions=(0.5, 0.25, 0.25), seed=0))


class TestSynthetic:
    def test_zero_gap(self):
        ds = generate_synthetic(SyntheticSpec(n=4000, d=6, target_spd=0.0, seed=11))
        gap = ds.labels[ds.protected == 0].mean() - ds.labels[ds.protected == 1].mean()
        assert abs(gap) < 3 / np.sqrt(ds.n)

    def test_target_gap_realized(self):
        ds = generate_synthetic(SyntheticSpec(n=20000, d=8, target_spd=0.3, seed=12))
        gap = ds.labels[ds.protected == 0].mean() - ds.labels[ds.protected == 1].mean()
        assert 0.27 <= gap <= 0.33

    def test_gap_survives_label_noise(self):
        ds = generate_synthetic(
            SyntheticSpec(n=20000, d=8, target_spd=0.3, label_noise=0.1, seed=13)
        )
        gap = ds.labels[ds.protected == 0].mean() - ds.labels[ds.protected == 1].mean()
        assert 0.27 <= gap <= 0.33

    def test_byte_identical_determinism(self):
        spec = SyntheticSpec(n=1000, d=5, target_spd=0.2, seed=21)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.protected.tobytes() == b.protected.tobytes()

    def test_protected_column_present(self):
        ds = generate_synthetic(SyntheticSpec(n=500, d=5, seed=1))
        j = ds.feature_names.index("protected")
        assert np.array_equal(ds.features[:, j].astype(int), ds.protected)

    def test_infeasible_noise_rejected(self):
        with pytest.raises(GenerationError):
            SyntheticSpec(n=1000, d=5, target_spd=0.5, label_noise=0.3)

    def test_too_small_rejected(self):
        with pytest.raises(GenerationError):
            SyntheticSpec(n=4, d=5)


class TestDumpRoundTrip:
    def test_exact_roundtrip(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(n=300, d=5, seed=17))
        path = tmp_path / "dump.csv"
        save_dump(ds, path)
        back = load_dump(path)
        assert back.feature_names == ds.feature_names
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.protected, ds.protected)

    def test_missing_reserved_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_dump(path)


class TestDataSetValidation:
    def test_nonbinary_labels_rejected(self):
        with pytest.raises(DataValidationError):
            DataSet(np.zeros((2, 1)), [0, 2], [0, 1], ("x",))

    def test_nonfinite_features_rejected(self):
        with pytest.raises(DataValidationError, match="non-finite"):
            DataSet(np.array([[np.nan], [1.0]]), [0, 1], [0, 1], ("x",))

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            DataSet(np.zeros((3, 1)), [0, 1], [0, 1, 0], ("x",))
