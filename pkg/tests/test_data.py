import math

import numpy as np
import pytest

from sting.data import (
    DataError,
    NormalizationStats,
    RawSeries,
    build_delta,
    build_delta_backward,
    build_mask,
    denormalize_array,
    fit_normalization,
    holdout_mask,
    holdout_windows,
    load_csv,
    make_windows,
    normalize_array,
    restore_targets,
    window_from_arrays,
    write_csv,
)


def delta_oracle(ts, mask):
    """Backward scan to the previous observation, independent of the recurrence."""
    T, D = mask.shape
    out = np.zeros((T, D))
    for t in range(1, T):
        for d in range(D):
            j = t - 1
            while j > 0 and not mask[j, d]:
                j -= 1
            out[t, d] = ts[t] - ts[j]
    return out


def test_delta_worked_example():
    ts = np.array([0.0, 2.0, 3.0, 7.0])
    m = np.array([[1], [0], [1], [1]], dtype=float)
    np.testing.assert_array_equal(build_delta(ts, m)[:, 0], [0, 2, 3, 4])


def test_delta_backward_example():
    ts = np.array([0.0, 2.0, 3.0, 7.0])
    m = np.array([[1], [0], [1], [1]], dtype=float)
    np.testing.assert_array_equal(build_delta_backward(ts, m)[:, 0], [3, 1, 4, 0])


def test_delta_fully_observed_and_single_observation():
    ts = np.array([0.0, 1.5, 4.0, 4.5, 9.0])
    full = np.ones((5, 1))
    np.testing.assert_array_equal(build_delta(ts, full)[:, 0], np.r_[0, np.diff(ts)])
    first = np.zeros((5, 1))
    first[0] = 1
    np.testing.assert_array_equal(build_delta(ts, first)[1:, 0], ts[1:] - ts[0])


def test_delta_matches_scan_oracle(rng):
    for _ in range(1000):
        T = int(rng.integers(1, 20))
        D = int(rng.integers(1, 5))
        ts = np.cumsum(rng.exponential(1.0, T) * rng.integers(0, 2, T))
        mask = (rng.random((T, D)) < rng.random()).astype(float)
        np.testing.assert_array_equal(build_delta(ts, mask), delta_oracle(ts, mask))


def test_delta_rejects_decreasing_timestamps():
    with pytest.raises(DataError):
        build_delta(np.array([0.0, 2.0, 1.0]), np.ones((3, 1)))


def test_build_mask_examples():
    raw = RawSeries(np.arange(2.0), np.array([[5.0, np.nan, 1.2], [np.nan] * 3]))
    np.testing.assert_array_equal(build_mask(raw), [[1, 0, 1], [0, 0, 0]])


def test_fit_normalization_examples():
    raw = RawSeries(
        np.arange(4.0),
        np.array([[0.0, np.nan, 3], [10, 4, 3], [5, np.nan, 3], [2, 8, 3]]),
    )
    st = fit_normalization(raw)
    np.testing.assert_array_equal(st.minimum, [0, 4, 3])
    np.testing.assert_array_equal(st.maximum, [10, 8, 3])
    np.testing.assert_array_equal(st.degenerate, [False, False, True])


def test_fit_normalization_rejects_unobserved_feature():
    raw = RawSeries(np.arange(2.0), np.array([[1.0, np.nan], [2.0, np.nan]]), ["a", "b"])
    with pytest.raises(DataError, match="'b'"):
        fit_normalization(raw)


def test_normalize_endpoints_and_round_trip(rng):
    st = NormalizationStats(np.array([0.0, 3.0]), np.array([10.0, 3.0]), eps=0.0)
    out = normalize_array(np.array([[10.0, 3.0]]), st)
    np.testing.assert_array_equal(out, [[1.0, 0.0]])
    st = NormalizationStats(np.array([-2.0, 1.0]), np.array([5.0, 9.0]))
    v = rng.uniform(-2, 9, size=(100, 2))
    np.testing.assert_allclose(denormalize_array(normalize_array(v, st), st), v, atol=1e-9)


def test_make_windows_counts_and_padding():
    raw = RawSeries(np.arange(96.0), np.ones((96, 2)))
    assert len(make_windows(raw, 48, 48)) == 2
    raw = RawSeries(np.arange(50.0), np.ones((50, 2)))
    ws = make_windows(raw, 48, 48)
    assert len(ws) == 2
    assert ws[1].padded_rows == 46
    assert ws[1].mask[2:].sum() == 0
    for w in ws:
        np.testing.assert_array_equal(w.delta[0], 0)


def _window(rng, T=10, D=10, p=0.7):
    vals = rng.normal(size=(T, D))
    vals[rng.random((T, D)) > p] = np.nan
    return window_from_arrays(np.arange(float(T)), vals)


def test_holdout_ratio_zero_is_identity(rng):
    w = _window(rng)
    train, tg = holdout_mask(w, 0.0, 0)
    np.testing.assert_array_equal(train.mask, w.mask)
    assert tg.count == 0


def test_holdout_exact_count():
    w = window_from_arrays(np.arange(10.0), np.ones((10, 10)))
    _, tg = holdout_mask(w, 0.2, 7)
    assert tg.count == 20


def test_holdout_never_touches_missing_cells(rng):
    for seed in range(1000):
        w = _window(rng, T=6, D=4)
        train, tg = holdout_mask(w, 0.3, seed)
        assert not (tg.positions & (w.mask == 0)).any()
        assert tg.count == math.floor(0.3 * w.mask.sum())
        np.testing.assert_array_equal(restore_targets(train, tg).mask, w.mask)


def test_global_holdout_recomputes_deltas(rng):
    ws = [_window(rng) for _ in range(5)]
    trains, _ = holdout_windows(ws, 0.5, 3)
    for t in trains:
        np.testing.assert_array_equal(t.delta, build_delta(t.timestamps, t.mask))
        np.testing.assert_array_equal(
            t.delta_backward, build_delta_backward(t.timestamps, t.mask)
        )


def test_load_csv_format(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n0,1.5,\n2,,3.0\n")
    raw = load_csv(p)
    assert raw.values.shape == (2, 2)
    np.testing.assert_array_equal(build_mask(raw), [[1, 0], [0, 1]])


def test_load_csv_header_only(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n")
    raw = load_csv(p)
    assert raw.values.shape == (0, 2)


def test_load_csv_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a\n2,1\n1,2\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p)
    p.write_text("t,a\n0,x\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(p)


def test_csv_round_trip(tmp_path, rng):
    vals = rng.normal(size=(7, 3))
    vals[2, 1] = np.nan
    raw = RawSeries(np.arange(7.0) * 0.5, vals, ["a", "b", "c"])
    write_csv(tmp_path / "x.csv", raw)
    back = load_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.values, raw.values)
    np.testing.assert_array_equal(back.timestamps, raw.timestamps)
