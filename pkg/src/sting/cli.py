"""``sting`` command line: train, impute, evaluate, ablate, downstream, curves, gen-data.

Config precedence, lowest to highest: built-in defaults, ``--config`` file,
``-o key=value`` overrides. The resolved config is written to
``<out_dir>/config.txt`` and reproduces the run on its own.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sting import evaluation as ev
from sting.checkpoint import CheckpointError
from sting.config import ConfigError, ExperimentConfig, derive_seed, load_config
from sting.data import (
    DataError,
    RawSeries,
    denormalize_array,
    fit_normalization,
    load_csv,
    make_windows,
    normalize,
    write_csv,
)
from sting.inference import impute_windows
from sting.synthetic import concat_series, corrupt_mcar, gen_sinusoid_mix
from sting.training import fit, init_state, load_state, save_state

log = logging.getLogger("sting")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, required=("data", "seed", "out_dir")) -> ExperimentConfig:
    overrides = _parse_overrides(args.override)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    return cfg.validate(required)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _emit_table(out: Path, stem: str, header, rows) -> str:
    ev.write_table(out / f"{stem}.csv", header, rows)
    text = ev.format_table(header, rows)
    (out / f"{stem}.txt").write_text(text + "\n")
    return text


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    raw = ev.load_raw_windows(cfg)
    stats = fit_normalization(raw)
    windows = [normalize(w, stats) for w in raw]
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    state = init_state(cfg, windows[0].shape[1])
    state.norm = stats
    state, metrics = fit(cfg, windows, state=state, out_dir=out)
    sha = save_state(out / "checkpoint.bin", state, cfg)
    print(f"trained {len(metrics)} epochs; checkpoint {out / 'checkpoint.bin'} sha256 {sha}")
    return 0


def cmd_impute(args) -> int:
    state, ckpt_cfg = load_state(args.checkpoint)
    if state.norm is None:
        raise CheckpointError("checkpoint carries no normalization statistics")
    overrides = _parse_overrides(args.override)
    cfg = ckpt_cfg
    if args.config or overrides:
        cfg = load_config(args.config, overrides)
    cfg = cfg.replace(seed=ckpt_cfg.seed if cfg.seed is None else cfg.seed)
    cfg.validate(("seed",))
    raw = load_csv(args.input)
    if raw.n_features != state.gen_fwd.n_features:
        raise DataError(
            f"input has {raw.n_features} features, checkpoint expects {state.gen_fwd.n_features}"
        )
    L = cfg.window_length
    windows = [normalize(w, state.norm) for w in make_windows(raw, L, L)]
    result = impute_windows(state, windows, cfg)
    imputed = denormalize_array(result.x_hat, state.norm).reshape(-1, raw.n_features)
    imputed = imputed[: raw.n_steps]
    observed = ~np.isnan(raw.values)
    # observed cells keep their exact input values
    imputed = np.where(observed, raw.values, imputed)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out_path, RawSeries(raw.timestamps, imputed, raw.feature_names))
    prov_path = Path(args.provenance) if args.provenance else out_path.with_name(
        out_path.stem + "_provenance.csv"
    )
    write_csv(prov_path, RawSeries(raw.timestamps, (~observed).astype(float), raw.feature_names))
    n_out = int(result.out_of_range.sum())
    print(
        f"imputed {int((~observed).sum())} cells -> {out_path} "
        f"(provenance {prov_path}; {n_out} outside the training range)"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    raw = ev.load_raw_windows(cfg)
    state = None
    if args.checkpoint:
        state, _ = load_state(args.checkpoint)
    res = ev.direct_evaluation(cfg, raw, state=state, out_dir=out)
    rows = [[name, value] for name, value in res.rmse.items()]
    print(_emit_table(out, "rmse", ["imputer", "rmse"], rows))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    rows = ev.run_ablation(cfg, ev.load_raw_windows(cfg), out)
    header, body = ev.ablation_table(rows)
    print(_emit_table(out, "ablation", header, body))
    return 0


def cmd_downstream(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    table = ev.downstream_eval(cfg, ev.load_raw_windows(cfg))
    header, body = ev.downstream_rows(table)
    print(_emit_table(out, "downstream", header, body))
    return 0


def cmd_curves(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    raw = ev.load_raw_windows(cfg)
    names = ("sting", "mean", "prev", "knn")
    rows, points = [], []
    for r in cfg.curve_ratios:
        rdir = out / f"ratio_{r:g}"
        res = ev.direct_evaluation(cfg, raw, names, out_dir=rdir, ratio=r)
        rows.append([f"{r:g}", *(res.rmse[n] for n in names)])
        points.extend({"imputer": n, "x": r, "y": res.rmse[n]} for n in names)
    with open(out / "curves.json", "w") as fh:
        json.dump(points, fh, indent=1)
    print(_emit_table(out, "curves", ["ratio", *names], rows))
    return 0


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, required=("seed", "out_dir"))
    out = _prepare_out(cfg)
    series = gen_sinusoid_mix(
        cfg.synth_windows,
        cfg.synth_length,
        cfg.synth_features,
        cfg.synth_noise_sd,
        seed=derive_seed(cfg.seed, "synthetic"),
        period_range=(cfg.synth_period_min, cfg.synth_period_max),
        mixing=cfg.synth_mixing,
        irregular=cfg.synth_irregular,
    )
    if not series:
        raise DataError("synth_windows must be positive to write a dataset")
    joined = concat_series(series)
    if args.missing_ratio:
        joined = corrupt_mcar(joined, args.missing_ratio, derive_seed(cfg.seed, "mcar"))
    path = out / (args.name or "synthetic.csv")
    write_csv(path, joined)
    print(f"wrote {joined.n_steps} rows x {joined.n_features} features to {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sting", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", "-c", help="flat key = value config file")
        sp.add_argument(
            "-o", "--set", dest="override", action="append", default=[],
            metavar="KEY=VALUE", help="override one config key (repeatable)",
        )
        if out:
            sp.add_argument("--out", help="output directory (same as -o out_dir=...)")

    for name, fn, help_ in (
        ("train", cmd_train, "pre-train and adversarially train, write checkpoint + metrics"),
        ("evaluate", cmd_evaluate, "holdout RMSE for STING and the baselines"),
        ("ablate", cmd_ablate, "ablation table"),
        ("downstream", cmd_downstream, "downstream regression table"),
        ("curves", cmd_curves, "holdout RMSE swept over missing ratios"),
    ):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        if name == "evaluate":
            sp.add_argument("--checkpoint", help="score this model instead of training one")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("impute", help="fill the gaps of a CSV with a trained model")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="CSV with missing cells")
    sp.add_argument("--output", required=True, help="imputed CSV path")
    sp.add_argument("--provenance", help="provenance CSV path (default: <output>_provenance.csv)")
    sp.set_defaults(func=cmd_impute)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    common(sp)
    sp.add_argument("--missing-ratio", type=float, default=0.0)
    sp.add_argument("--name", help="file name inside out_dir (default synthetic.csv)")
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"sting: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"sting: error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"sting: failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
