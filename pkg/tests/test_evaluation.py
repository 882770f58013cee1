import numpy as np
import pytest

from conftest import tiny_config
from sting.data import EvalTargets, window_from_arrays
from sting.evaluation import (
    ABLATIONS,
    ablation_table,
    baseline_knn,
    baseline_mean,
    baseline_prev,
    direct_evaluation,
    downstream_eval,
    downstream_rows,
    feature_means,
    format_table,
    load_raw_windows,
    masked_distances,
    rmse_heldout,
    run_ablation,
    write_table,
)


def W(values, ts=None):
    values = np.asarray(values, dtype=float)
    ts = np.arange(float(values.shape[0])) if ts is None else ts
    return window_from_arrays(ts, values)


def test_rmse_examples(rng):
    pos = np.zeros((3, 2), bool)
    pos[1, 0] = True
    truth = np.zeros((3, 2))
    truth[1, 0] = 0.5
    t = EvalTargets(pos, truth)
    imputed = np.zeros((3, 2))
    imputed[1, 0] = 0.3
    assert rmse_heldout(imputed, t) == pytest.approx(0.2, abs=1e-15)
    assert rmse_heldout(truth, t) == 0.0
    noisy = imputed + np.where(pos, 0.0, rng.normal(size=pos.shape))
    assert rmse_heldout(noisy, t) == rmse_heldout(imputed, t)


def test_rmse_matches_direct_formula(rng):
    pos = rng.random((4, 6, 3)) < 0.3
    truth = rng.normal(size=pos.shape)
    imp = rng.normal(size=pos.shape)
    ts = [EvalTargets(p, v) for p, v in zip(pos, truth)]
    ref = np.sqrt(((imp - truth) ** 2)[pos].sum() / pos.sum())
    assert rmse_heldout(imp, ts) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ValueError):
        rmse_heldout(imp, [EvalTargets(np.zeros_like(p), v) for p, v in zip(pos, truth)])


def test_prev_and_mean_examples():
    w = W([[1.0], [np.nan], [np.nan], [4.0]])
    np.testing.assert_array_equal(baseline_prev(w, np.array([0.0]))[:, 0], [1, 1, 1, 4])
    w2 = W([[2.0], [np.nan], [4.0]])
    means = feature_means([w2])
    assert means[0] == 3.0
    np.testing.assert_array_equal(baseline_mean(w2, means)[:, 0], [2, 3, 4])
    lead = W([[np.nan], [5.0]])
    np.testing.assert_array_equal(baseline_prev(lead, np.array([9.0]))[:, 0], [9, 5])


def test_prev_is_idempotent(rng):
    vals = rng.normal(size=(12, 3))
    vals[rng.random(vals.shape) < 0.4] = np.nan
    w = W(vals)
    once = baseline_prev(w, feature_means([w]))
    twice = baseline_prev(W(once), feature_means([w]))
    np.testing.assert_array_equal(once, twice)


def test_knn_uses_exact_duplicate(rng):
    base = rng.normal(size=(6, 2))
    holey = base.copy()
    holey[2, 1] = np.nan
    others = [W(rng.normal(size=(6, 2)) + 5) for _ in range(4)]
    out = baseline_knn([W(holey), W(base), *others], k=1)
    np.testing.assert_array_equal(out[0], base)


def test_masked_distances_oracle(rng):
    x = rng.normal(size=(5, 7))
    m = (rng.random((5, 7)) < 0.6).astype(float)
    m[4] = 0
    d = masked_distances(x, m)
    for i in range(5):
        for j in range(5):
            both = (m[i] > 0) & (m[j] > 0)
            if i == j or not both.any():
                assert d[i, j] == np.inf
            else:
                assert d[i, j] == pytest.approx(np.mean((x[i, both] - x[j, both]) ** 2), abs=1e-12)


def test_direct_evaluation_reports_every_imputer(tmp_path):
    cfg = tiny_config()
    raw = load_raw_windows(cfg)
    res = direct_evaluation(cfg, raw, out_dir=tmp_path)
    assert set(res.rmse) == {"sting", "mean", "prev", "knn"}
    assert all(np.isfinite(v) and v >= 0 for v in res.rmse.values())
    assert (tmp_path / "checkpoint.bin").exists()


def test_ablation_table_shape(tmp_path):
    cfg = tiny_config()
    rows = run_ablation(cfg, load_raw_windows(cfg), tmp_path)
    assert [r.variant for r in rows] == list(ABLATIONS)
    assert rows[0].increase_pct == 0.0
    by = {r.variant: r for r in rows}
    assert by["w/o optimal z'"].checkpoint_sha256 == by["full"].checkpoint_sha256
    assert by["w/o attention"].checkpoint_sha256 != by["full"].checkpoint_sha256
    header, body = ablation_table(rows)
    assert header[:3] == ["variant", "rmse", "increase_pct"] and len(body) == 4


def test_downstream_ratio_zero_matches_ideal():
    cfg = tiny_config(synth_windows=20)
    table = downstream_eval(cfg, load_raw_windows(cfg), ratios=[0.0, 0.5])
    assert set(table.rows) == {"ideal", "sting", "mean", "prev", "knn"}
    for name, row in table.rows.items():
        assert len(row) == 2
        assert row[0] == table.rows["ideal"][0]
    assert table.rows["ideal"][0] == table.rows["ideal"][1]
    header, body = downstream_rows(table)
    assert header == ["imputer", "0", "0.5"] and len(body) == 5


def test_downstream_requires_complete_data():
    cfg = tiny_config()
    ws = load_raw_windows(cfg)
    ws[0] = W(np.where(np.eye(16, 3) > 0, np.nan, ws[0].x_bar))
    with pytest.raises(ValueError):
        downstream_eval(cfg, ws, ratios=[0.0])


def test_table_writers(tmp_path):
    header, rows = ["a", "b"], [["x", 0.5], ["yy", float("nan")]]
    write_table(tmp_path / "t.csv", header, rows)
    assert (tmp_path / "t.csv").read_text().splitlines() == ["a,b", "x,0.500000", "yy,nan"]
    text = format_table(header, rows).splitlines()
    assert len(text) == 4 and text[1].startswith("--")
