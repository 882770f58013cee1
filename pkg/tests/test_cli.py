import numpy as np
import pytest

from sting.cli import main
from sting.data import load_csv

TINY = [
    "-o", "synth_windows=12", "-o", "synth_length=16", "-o", "synth_features=3",
    "-o", "window_length=16", "-o", "stride=16", "-o", "hidden_size=6",
    "-o", "disc_hidden_size=6", "-o", "n_heads=2", "-o", "batch_size=8",
    "-o", "pretrain_epochs=1", "-o", "epochs=1", "-o", "search_iterations=2",
    "-o", "regressor_epochs=1", "-o", "regressor_hidden=4", "-o", "knn_k=2",
]


def run(*args):
    return main([str(a) for a in args])


def test_missing_field_is_usage_error(tmp_path, capsys):
    assert run("train", "-o", "seed=1", "--out", tmp_path) == 1
    assert "data" in capsys.readouterr().err


def test_bad_values_and_commands(tmp_path, capsys):
    assert run("train", "-o", "seed=x", "-o", "data=synthetic", "--out", tmp_path) == 1
    assert run("train", "-o", "nonsense=3", "-o", "seed=1", "--out", tmp_path) == 1
    assert run("train", "-o", "seed=1", "-o", "data=synthetic", "-o", "lr_g=0", "--out", tmp_path) == 1
    assert run("frobnicate") == 1
    assert run() == 1


def test_runtime_failure_exit_code(tmp_path):
    assert run("train", "-o", "seed=1", "-o", f"data={tmp_path}/nope.csv", "--out", tmp_path) == 2


def test_train_is_reproducible_and_creates_out_dir(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / "deep" / name
        assert run("train", *TINY, "-o", "seed=4", "-o", "data=synthetic", "--out", out) == 0
        outs.append(out)
    for f in ("metrics.jsonl", "checkpoint.bin"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert len((outs[0] / "metrics.jsonl").read_text().splitlines()) == 2


def test_config_file_round_trip(tmp_path):
    out = tmp_path / "r"
    assert run("gen-data", "-o", "seed=2", "-o", "synth_windows=3", "--out", out) == 0
    cfg_text = (out / "config.txt").read_text()
    (tmp_path / "c.txt").write_text(cfg_text)
    assert run("gen-data", "--config", tmp_path / "c.txt") == 0
    assert (out / "config.txt").read_text() == cfg_text


def test_impute_round_trip(tmp_path):
    data = tmp_path / "data"
    assert run("gen-data", *TINY, "-o", "seed=3", "--out", data, "--missing-ratio", 0.3) == 0
    csv = data / "synthetic.csv"
    model = tmp_path / "model"
    assert run("train", *TINY, "-o", "seed=3", "-o", f"data={csv}", "--out", model) == 0
    out = tmp_path / "imp.csv"
    assert run("impute", "--checkpoint", model / "checkpoint.bin", "--input", csv, "--output", out) == 0
    raw, imp = load_csv(csv), load_csv(out)
    prov = load_csv(tmp_path / "imp_provenance.csv")
    missing = np.isnan(raw.values)
    assert not np.isnan(imp.values).any()
    np.testing.assert_array_equal(imp.values[~missing], raw.values[~missing])
    np.testing.assert_array_equal(prov.values, missing.astype(float))
    np.testing.assert_array_equal(imp.timestamps, raw.timestamps)


def test_impute_complete_input_is_unchanged(tmp_path):
    data = tmp_path / "data"
    assert run("gen-data", *TINY, "-o", "seed=5", "--out", data) == 0
    csv = data / "synthetic.csv"
    model = tmp_path / "model"
    assert run("train", *TINY, "-o", "seed=5", "-o", f"data={csv}", "--out", model) == 0
    out = tmp_path / "imp.csv"
    assert run("impute", "--checkpoint", model / "checkpoint.bin", "--input", csv, "--output", out) == 0
    np.testing.assert_array_equal(load_csv(out).values, load_csv(csv).values)


def test_evaluate_and_tables(tmp_path, capsys):
    out = tmp_path / "e"
    assert run("evaluate", *TINY, "-o", "seed=1", "-o", "data=synthetic", "--out", out) == 0
    rows = (out / "rmse.csv").read_text().splitlines()
    assert rows[0] == "imputer,rmse"
    assert [r.split(",")[0] for r in rows[1:]] == ["sting", "mean", "prev", "knn"]
    assert (out / "rmse.txt").exists()


def test_ablate_columns(tmp_path):
    out = tmp_path / "a"
    assert run("ablate", *TINY, "-o", "seed=1", "-o", "data=synthetic", "--out", out) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["variant", "rmse", "increase_pct"]
    assert len(lines) == 5


def test_downstream_command(tmp_path):
    out = tmp_path / "d"
    args = [*TINY, "-o", "seed=1", "-o", "data=synthetic", "-o", "downstream_ratios=0,0.5"]
    assert run("downstream", *args, "--out", out) == 0
    lines = (out / "downstream.csv").read_text().splitlines()
    assert lines[0] == "imputer,0,0.5" and len(lines) == 6


def test_curves_default_sweep(tmp_path):
    from sting.config import ExperimentConfig

    assert ExperimentConfig().curve_ratios == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    out = tmp_path / "c"
    args = [*TINY, "-o", "seed=1", "-o", "data=synthetic", "-o", "curve_ratios=0.2,0.6"]
    assert run("curves", *args, "--out", out) == 0
    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0] == "ratio,sting,mean,prev,knn"
    assert [l.split(",")[0] for l in lines[1:]] == ["0.2", "0.6"]
    assert (out / "curves.json").exists()
