import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selreg.dataset import (
    AUDIT_SPLIT,
    HOUSE_FEATURES,
    ColumnMeta,
    Dataset,
    DatasetError,
    PreprocessRecord,
    SplitPlan,
    add_random_feature,
    gaussian_shift,
    load_csv,
    perturb,
    preprocess,
    split,
    synth_heteroscedastic,
    synth_houses,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ------------------------------------------------------------------ loading


def test_load_numeric_csv(tmp_path):
    data = load_csv(write(tmp_path, "x,y\n1,2\n3,4\n5,6\n"), "y")
    assert (data.n, data.d) == (3, 1)
    assert data.columns[0].kind == "numeric"
    np.testing.assert_array_equal(data.features[:, 0], [1, 3, 5])
    np.testing.assert_array_equal(data.target, [2, 4, 6])


def test_categories_in_first_appearance_order(tmp_path):
    data = load_csv(write(tmp_path, "c,y\nb,1\na,2\nb,3\n"), "y")
    assert data.columns[0].kind == "categorical"
    assert data.columns[0].categories == ("b", "a")


def test_column_kind_override(tmp_path):
    data = load_csv(write(tmp_path, "c,y\n1,1\n2,2\n1,3\n"), "y", {"c": "categorical"})
    assert data.columns[0].categories == ("1", "2")


@pytest.mark.parametrize(
    "text, msg",
    [
        ("x,y\n", "empty dataset"),
        ("", "empty dataset"),
        ("x,z\n1,2\n", "missing target"),
        ("x,y\n1,2\n3\n", "ragged"),
        ("x,y\n1,a\n", "target column must be numeric"),
    ],
)
def test_load_errors(tmp_path, text, msg):
    with pytest.raises(DatasetError, match=msg):
        load_csv(write(tmp_path, text), "y")


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="missing file"):
        load_csv(tmp_path / "nope.csv", "y")


def test_csv_roundtrip(tmp_path):
    data, _ = synth_heteroscedastic(20, 3, seed=1)
    data.to_csv(tmp_path / "out.csv")
    back = load_csv(tmp_path / "out.csv", "y")
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.target, data.target)
    assert back.names == data.names


def test_duplicate_names_rejected():
    with pytest.raises(DatasetError, match="unique"):
        Dataset(np.zeros((2, 2)), np.zeros(2), (ColumnMeta("a"), ColumnMeta("a")))


# ------------------------------------------------------------ preprocessing


def test_minmax_affine_map():
    raw = Dataset(np.array([[0.0], [5.0], [10.0]]), np.array([1.0, 2.0, 3.0]), (ColumnMeta("x"),))
    data, rec = preprocess(raw)
    np.testing.assert_allclose(data.features[:, 0], [0, 0.5, 1])
    np.testing.assert_allclose(data.target, [0, 0.5, 1])
    np.testing.assert_allclose(rec.inverse_target(data.target), raw.target, rtol=1e-12)


def test_onehot_encoding():
    raw = Dataset(np.array([["a"], ["b"], ["a"]], dtype=object), np.array([1.0, 2.0, 3.0]),
                  (ColumnMeta("c", "categorical", ("a", "b")),))
    data, _ = preprocess(raw)
    np.testing.assert_array_equal(data.features, [[1, 0], [0, 1], [1, 0]])


def test_unseen_category_encodes_as_zeros(tmp_path):
    raw = load_csv(write(tmp_path, "c,y\na,1\nb,2\na,3\nz,4\n"), "y")
    data, rec = preprocess(raw, fit_rows=[0, 1, 2])
    assert data.names == ["c=a", "c=b"]
    np.testing.assert_array_equal(data.features, [[1, 0], [0, 1], [1, 0], [0, 0]])


def test_constant_column_scales_to_zero():
    raw = Dataset(np.array([[3.0, 1.0], [3.0, 2.0]]), np.array([1.0, 2.0]), (ColumnMeta("a"), ColumnMeta("b")))
    data, _ = preprocess(raw)
    np.testing.assert_array_equal(data.features[:, 0], [0.0, 0.0])


def test_fit_split_in_unit_interval_and_idempotent():
    raw, _ = synth_heteroscedastic(200, 4, seed=3)
    fit_rows = np.arange(120)
    data, rec = preprocess(raw, fit_rows)
    fit = data.features[fit_rows]
    assert fit.min() >= 0 and fit.max() <= 1
    assert data.target[fit_rows].min() == 0 and data.target[fit_rows].max() == 1
    again, _ = preprocess(data.rows(fit_rows))
    np.testing.assert_allclose(again.features, fit, atol=1e-12)


def test_record_roundtrip():
    raw, _ = synth_heteroscedastic(50, 2, seed=0)
    data, rec = preprocess(raw)
    rec2 = PreprocessRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    np.testing.assert_array_equal(rec2.apply(raw).features, data.features)


def test_preprocess_rejects_nonfinite():
    raw = Dataset(np.array([[np.nan], [1.0]]), np.array([1.0, 2.0]), (ColumnMeta("x"),))
    with pytest.raises(DatasetError, match="non-finite"):
        preprocess(raw)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
def test_target_inverse_roundtrip(values):
    y = np.array(values)
    raw = Dataset(np.zeros((len(y), 1)), y, (ColumnMeta("x"),))
    _, rec = preprocess(raw)
    back = rec.inverse_target(rec.scale_target(y))
    if y.max() > y.min():
        np.testing.assert_allclose(back, y, rtol=1e-12, atol=1e-12 * np.abs(y).max())


# ---------------------------------------------------------------- splitting


def test_split_sizes():
    plan = split(10, (("train", 0.6), ("calibration", 0.2), ("test", 0.2)), seed=7)
    assert plan.sizes() == {"train": 6, "calibration": 2, "test": 2}


def test_split_remainder_to_last():
    plan = split(11, (0.5, 0.5), seed=0)
    assert plan.sizes() == {"split0": 5, "split1": 6}


def test_split_deterministic_and_json():
    a = split(5, (0.5, 0.5), seed=3)
    b = split(5, (0.5, 0.5), seed=3)
    assert a == b
    assert SplitPlan.from_json(a.to_json()) == a


def test_empty_split():
    with pytest.raises(DatasetError, match="empty split"):
        split(3, AUDIT_SPLIT, seed=0)


@pytest.mark.parametrize("fractions", [(0.5, 0.6), (0.5, -0.1, 0.6)])
def test_bad_fractions(fractions):
    with pytest.raises(DatasetError):
        split(10, fractions)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 300), st.integers(0, 2**32 - 1))
def test_split_is_partition(n, seed):
    plan = split(n, AUDIT_SPLIT, seed=seed)
    parts = [plan.indices(k) for k in plan.names]
    allrows = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(allrows, np.arange(n))


# ------------------------------------------------------- synthetic & shifts


def test_random_feature():
    data, _ = synth_houses(500, seed=0)
    out = add_random_feature(data, seed=4)
    assert out.d == data.d + 1 and out.names[-1] == "X_Random"
    col = out.features[:, -1]
    assert col.min() >= 0 and col.max() <= 1
    np.testing.assert_array_equal(col, add_random_feature(data, seed=4).features[:, -1])


def test_random_feature_name_collision():
    data, _ = synth_heteroscedastic(20, 2, seed=0)
    once = add_random_feature(data, seed=0)
    twice = add_random_feature(once, seed=1)
    assert twice.names[-1] == "X_Random_1"


def test_random_feature_uncorrelated_with_target():
    data, _ = synth_heteroscedastic(10_000, 3, seed=11)
    col = add_random_feature(data, seed=12).features[:, -1]
    assert abs(np.corrcoef(col, data.target)[0, 1]) < 0.05


def test_perturb_identity_and_isolation():
    data, _ = synth_heteroscedastic(100, 4, seed=0)
    same = perturb(data, [], seed=1)
    np.testing.assert_array_equal(same.features, data.features)
    out = perturb(data, ["x1", "x3"], seed=1)
    np.testing.assert_array_equal(out.features[:, [1, 3]], data.features[:, [1, 3]])
    np.testing.assert_array_equal(out.target, data.target)
    assert not np.array_equal(out.features[:, 0], data.features[:, 0])


def test_perturb_noise_moments():
    data, _ = synth_heteroscedastic(10_000, 2, seed=0)
    diff = perturb(data, ["x2"], seed=5).features[:, 1] - data.features[:, 1]
    assert abs(diff.mean() - 5) < 0.05
    assert abs(diff.std(ddof=1) - 1) < 0.05


def test_perturb_unknown_feature():
    data, _ = synth_heteroscedastic(10, 2, seed=0)
    with pytest.raises(DatasetError, match="unknown feature"):
        perturb(data, ["nope"])


def test_gaussian_shift_copies():
    X = np.zeros((3, 2))
    out = gaussian_shift(X, [0], seed=0)
    assert np.all(X == 0) and np.all(out[:, 1] == 0)


def test_zero_noise_is_exact():
    data, sd = synth_heteroscedastic(50, 3, "constant", seed=2, noise_scale=0.0)
    X = data.features
    g = X[:, 0] + np.sin(np.pi * X) @ (1.0 / np.arange(1, 4))
    np.testing.assert_array_equal(sd, 0.0)
    np.testing.assert_allclose(data.target, g, rtol=0, atol=1e-15)


def test_increasing_profile_top_decile_noisier():
    data, sd = synth_heteroscedastic(5000, 2, seed=4)
    X = data.features
    resid = data.target - (X[:, 0] + np.sin(np.pi * X) @ np.array([1.0, 0.5]))
    order = np.argsort(X[:, 0])
    assert resid[order[-500:]].var() > resid[order[:500]].var()


def test_synthetic_determinism():
    a, _ = synth_heteroscedastic(30, 2, "bump", seed=9)
    b, _ = synth_heteroscedastic(30, 2, "bump", seed=9)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.target, b.target)


def test_unknown_profile():
    with pytest.raises(DatasetError, match="noise profile"):
        synth_heteroscedastic(20, 2, "wiggly")


def test_houses_shape_and_noise_ordering():
    data, sd = synth_houses(4000, seed=1)
    assert data.names == list(HOUSE_FEATURES) and data.target_name == "LogSalePrice"
    area = data.features[:, 0]
    big = area > np.quantile(area, 0.9)
    small = area < np.quantile(area, 0.1)
    assert sd[big].mean() > sd[small].mean()
    air = data.features[:, 2] == 1
    assert sd[air].mean() < sd[~air].mean()
