import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fcn_instruct.fcn import (
    AdjacencyMatrix,
    BoldSeries,
    FcnMatrix,
    InvalidInputError,
    n_windows,
    normalize_adjacency,
    pearson_fcn,
    read_bold_csv,
    read_fcn_binary,
    read_fcn_csv,
    sliding_windows,
    threshold_adjacency,
    write_bold_csv,
    write_fcn_binary,
    write_fcn_csv,
)


def loop_pearson(x):
    """Correlation by explicit sums over time points."""
    T, D = x.shape
    out = np.zeros((D, D))
    for i in range(D):
        for j in range(D):
            mi = sum(x[t, i] for t in range(T)) / T
            mj = sum(x[t, j] for t in range(T)) / T
            num = sum((x[t, i] - mi) * (x[t, j] - mj) for t in range(T))
            di = math.sqrt(sum((x[t, i] - mi) ** 2 for t in range(T)))
            dj = math.sqrt(sum((x[t, j] - mj) ** 2 for t in range(T)))
            out[i, j] = num / (di * dj)
    return out


def dense_normalize(a):
    n = len(a)
    m = a + np.eye(n)
    deg = m.sum(axis=1)
    dm = np.diag(1.0 / np.sqrt(deg))
    return dm @ m @ dm


def series(x, sid="s"):
    return BoldSeries(sid, np.asarray(x, dtype=float))


def test_identical_columns_correlate_exactly():
    x = np.random.default_rng(0).standard_normal(20)
    f = pearson_fcn(series(np.column_stack([x, x, -x])))
    assert f.values[0, 1] == 1.0
    assert f.values[0, 2] == -1.0


def test_pearson_matches_loop_oracle_6x4():
    x = np.random.default_rng(1).standard_normal((6, 4))
    np.testing.assert_allclose(pearson_fcn(series(x)).values, loop_pearson(x), atol=1e-10, rtol=0)


def test_degenerate_rows_are_zero_off_diagonal():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((10, 3))
    x[:, 1] = 4.2
    f = pearson_fcn(series(x))
    assert f.degenerate_rows == frozenset({1}) or set(f.degenerate_rows) == {1}
    assert f.values[1, 1] == 1.0
    assert np.all(f.values[1, [0, 2]] == 0) and np.all(f.values[[0, 2], 1] == 0)


def test_too_few_timepoints():
    with pytest.raises(InvalidInputError):
        pearson_fcn(series(np.zeros((1, 3))))


def test_nonfinite_series_rejected():
    x = np.zeros((5, 2))
    x[2, 1] = np.nan
    with pytest.raises(InvalidInputError):
        series(x)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(3, 20), st.integers(2, 6)),
           elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False)),
    st.floats(0.1, 10), st.floats(-50, 50), st.integers(0, 5),
)
def test_pearson_affine_invariance(x, a, b, col):
    if np.any(x.std(axis=0) < 1e-3 * (1 + np.abs(x).max(axis=0))):
        return
    col = col % x.shape[1]
    f0 = pearson_fcn(series(x)).values
    y = x.copy()
    y[:, col] = a * y[:, col] + b
    np.testing.assert_allclose(pearson_fcn(series(y)).values, f0, atol=1e-10)
    y[:, col] = -y[:, col]
    flipped = f0.copy()
    flipped[col, :] *= -1
    flipped[:, col] *= -1
    flipped[col, col] = 1.0
    np.testing.assert_allclose(pearson_fcn(series(y)).values, flipped, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
def test_fcn_matrix_invariants(x):
    f = pearson_fcn(series(x)).values
    np.testing.assert_allclose(f, f.T, atol=1e-12)
    assert np.all(np.abs(f) <= 1.0)
    assert np.all(np.diag(f) == 1.0)


def test_paper_windows():
    x = np.random.default_rng(3).standard_normal((180, 4))
    ws = sliding_windows(series(x, "sub"), 100, 20)
    assert len(ws) == 5
    for k, w in enumerate(ws):
        np.testing.assert_array_equal(w.samples, x[20 * k : 20 * k + 100])
        assert w.window_origin == ("sub", 20 * k)


def test_window_equal_to_length_and_trailing_drop():
    x = np.random.default_rng(4).standard_normal((103, 2))
    ws = sliding_windows(series(x), 100, 20)
    assert len(ws) == 1 and ws[0].window_origin[1] == 0
    ws = sliding_windows(series(x[:100]), 100, 20)
    assert len(ws) == 1
    np.testing.assert_array_equal(ws[0].samples, x[:100])


def test_window_errors():
    x = series(np.zeros((10, 2)) + np.arange(10)[:, None])
    with pytest.raises(InvalidInputError):
        sliding_windows(x, 11, 1)
    with pytest.raises(InvalidInputError):
        sliding_windows(x, 5, 0)


def test_window_count_grid():
    for T in range(2, 61):
        for L in range(2, T + 1):
            for P in range(1, 11):
                assert n_windows(T, L, P) == (T - L) // P + 1


def test_threshold_examples():
    eye = FcnMatrix(np.eye(4))
    assert not threshold_adjacency(eye, 0.5).values.any()
    full = threshold_adjacency(FcnMatrix(np.full((4, 4), 0.1) + 0.9 * np.eye(4)), 0.0).values
    np.testing.assert_array_equal(full, 1 - np.eye(4))
    vals = np.array([[1, 0.6, -0.3, -0.6], [0.6, 1, 0.3, 0.3], [-0.3, 0.3, 1, -0.6], [-0.6, 0.3, -0.6, 1]])
    a = threshold_adjacency(FcnMatrix(vals), 0.5).values
    for i, j in itertools.product(range(4), range(4)):
        assert a[i, j] == (1 if i != j and abs(vals[i, j]) >= 0.5 else 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(D, seed, t1, t2):
    t1, t2 = sorted((t1, t2))
    x = np.random.default_rng(seed).standard_normal((12, D))
    f = pearson_fcn(series(x))
    a1 = threshold_adjacency(f, t1).values
    a2 = threshold_adjacency(f, t2).values
    assert np.all(a2 <= a1)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_adjacency(AdjacencyMatrix(np.zeros((3, 3)))).values, np.eye(3))
    k2 = normalize_adjacency(AdjacencyMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))).values
    np.testing.assert_allclose(k2, 0.5, atol=1e-15)


def test_normalize_exhaustive_small_graphs():
    for n in range(1, 6):
        edges = list(itertools.combinations(range(n), 2))
        for mask in range(2 ** len(edges)):
            a = np.zeros((n, n))
            for b, (i, j) in enumerate(edges):
                if mask >> b & 1:
                    a[i, j] = a[j, i] = 1
            got = normalize_adjacency(AdjacencyMatrix(a)).values
            np.testing.assert_allclose(got, dense_normalize(a), atol=1e-12, rtol=0)
            np.testing.assert_allclose(got, got.T, atol=1e-12)
            assert got.min() >= 0 and got.max() <= 1


def test_adjacency_invariants_enforced():
    with pytest.raises(InvalidInputError):
        AdjacencyMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        AdjacencyMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_binary_roundtrip_and_layout(tmp_path):
    f = pearson_fcn(series(np.random.default_rng(5).standard_normal((9, 5))))
    p = tmp_path / "a.fcn"
    write_fcn_binary(f, p)
    raw = p.read_bytes()
    assert raw[:4] == b"FCN1"
    assert int.from_bytes(raw[4:8], "little") == 5
    assert len(raw) == 8 + 25 * 8
    np.testing.assert_array_equal(np.frombuffer(raw[8:], "<f8").reshape(5, 5), f.values)
    np.testing.assert_array_equal(read_fcn_binary(p).values, f.values)


def test_binary_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.fcn"
    p.write_bytes(b"XXXX" + (1).to_bytes(4, "little") + np.ones(1).tobytes())
    with pytest.raises(InvalidInputError):
        read_fcn_binary(p)


def test_csv_roundtrips(tmp_path):
    x = np.random.default_rng(6).standard_normal((7, 3))
    f = pearson_fcn(series(x))
    write_fcn_csv(f, tmp_path / "f.csv")
    np.testing.assert_allclose(read_fcn_csv(tmp_path / "f.csv").values, f.values, atol=1e-15)
    write_bold_csv(series(x, "abc"), tmp_path / "b.csv", ["r0", "r1", "r2"])
    back = read_bold_csv(tmp_path / "b.csv", "abc")
    np.testing.assert_array_equal(back.samples, x)
    assert back.subject_id == "abc"
