"""Held-out RMSE, simple baselines, downstream regression and ablations.

Everything here works in normalized space.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from sting import kernels
from sting.config import ExperimentConfig, derive_seed
from sting.data import (
    EvalTargets,
    NormalizationStats,
    RawSeries,
    TimeSeriesWindow,
    fit_normalization,
    holdout_windows,
    load_csv,
    make_windows,
    normalize,
    normalize_array,
    stack_windows,
    window_from_arrays,
)
from sting.inference import impute_windows
from sting.synthetic import corrupt_mcar, gen_sinusoid_mix
from sting.training import TrainState, fit, load_state, save_state

log = logging.getLogger(__name__)

Targets = Union[EvalTargets, Sequence[EvalTargets]]


def _stack_targets(targets: Targets):
    if isinstance(targets, EvalTargets):
        return targets.positions, targets.values
    return (
        np.stack([t.positions for t in targets]),
        np.stack([t.values for t in targets]),
    )


def rmse_heldout(imputed: np.ndarray, targets: Targets) -> float:
    positions, truth = _stack_targets(targets)
    positions = positions.astype(bool)
    if imputed.shape != positions.shape:
        raise ValueError(f"imputed shape {imputed.shape} != targets shape {positions.shape}")
    if not positions.any():
        raise ValueError("no held-out cells to score")
    diff = imputed[positions] - truth[positions]
    return float(np.sqrt(np.mean(diff**2)))


def _windows(windows) -> list[TimeSeriesWindow]:
    return [windows] if isinstance(windows, TimeSeriesWindow) else list(windows)


def _squeeze(windows, out: np.ndarray) -> np.ndarray:
    return out[0] if isinstance(windows, TimeSeriesWindow) else out


def feature_means(windows: Sequence[TimeSeriesWindow]) -> np.ndarray:
    """Per-feature mean over observed cells (0 for a never-observed feature)."""
    arr = stack_windows(_windows(windows))
    m = arr["mask"]
    counts = m.sum(axis=(0, 1))
    sums = (arr["x_bar"] * m).sum(axis=(0, 1))
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def baseline_mean(windows, means: np.ndarray) -> np.ndarray:
    ws = _windows(windows)
    arr = stack_windows(ws)
    out = np.where(arr["mask"] > 0, arr["x_bar"], means)
    return _squeeze(windows, out)


def baseline_prev(windows, means: np.ndarray) -> np.ndarray:
    """Carry the last observation forward; leading gaps take the feature mean."""
    ws = _windows(windows)
    out = np.stack(
        [
            kernels.carry_forward(w.x_bar, (w.mask > 0).astype(np.uint8), means)
            for w in ws
        ]
    )
    return _squeeze(windows, out)


def masked_distances(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean squared difference over co-observed cells, ``inf`` without overlap.

    Rows are flattened windows. The diagonal is ``inf``.
    """
    m = mask.astype(np.float64)
    x = np.where(m > 0, values, 0.0)
    x2 = x * x
    overlap = m @ m.T
    sq = x2 @ m.T + m @ x2.T - 2.0 * (x @ x.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(overlap > 0, np.maximum(sq, 0.0) / overlap, np.inf)
    np.fill_diagonal(d, np.inf)
    return d


def baseline_knn(windows, k: int = 10, means: Optional[np.ndarray] = None) -> np.ndarray:
    """Average the ``k`` nearest windows that observe each missing cell.

    Window distance is the mean squared difference over co-observed cells.
    Cells no neighbour observes fall back to ``means``.
    """
    ws = _windows(windows)
    arr = stack_windows(ws)
    N, T, D = arr["x_bar"].shape
    x = arr["x_bar"].reshape(N, -1)
    m = arr["mask"].reshape(N, -1)
    if means is None:
        means = feature_means(ws)
    dist = masked_distances(x, m)
    order = np.argsort(dist, axis=1, kind="stable")
    order = np.where(np.take_along_axis(dist, order, axis=1) < np.inf, order, -1)
    fallback = np.tile(means, T)
    out = kernels.knn_fill(order, x, (m > 0).astype(np.uint8), k, fallback)
    return _squeeze(windows, out.reshape(N, T, D))


# ---------------------------------------------------------------------------
# direct evaluation


def load_raw_windows(cfg: ExperimentConfig) -> list[TimeSeriesWindow]:
    """Windows in original units from the configured data source."""
    if cfg.data == "synthetic":
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
    else:
        series = [load_csv(cfg.data)]
    windows = []
    for s in series:
        windows.extend(make_windows(s, cfg.window_length, cfg.stride))
    return windows


@dataclass
class DirectEvaluation:
    rmse: dict[str, float]
    state: Optional[TrainState]
    stats: NormalizationStats
    train: list[TimeSeriesWindow]
    targets: list[EvalTargets]
    metrics: list[dict] = field(default_factory=list)
    checkpoint_sha256: Optional[str] = None


def prepare_holdout(cfg: ExperimentConfig, raw_windows: Sequence[TimeSeriesWindow], ratio=None):
    """Holdout over all observed cells, then normalize with train-only stats."""
    ratio = cfg.holdout_ratio if ratio is None else ratio
    train_raw, targets_raw = holdout_windows(raw_windows, ratio, derive_seed(cfg.seed, "holdout"))
    stats = fit_normalization(train_raw)
    train = [normalize(w, stats) for w in train_raw]
    targets = [
        EvalTargets(t.positions, np.where(t.positions, normalize_array(t.values, stats), 0.0))
        for t in targets_raw
    ]
    return train, targets, stats


def impute_baselines(
    train: Sequence[TimeSeriesWindow], names: Sequence[str], k: int = 10
) -> dict[str, np.ndarray]:
    means = feature_means(train)
    out = {}
    for name in names:
        if name == "mean":
            out[name] = baseline_mean(train, means)
        elif name == "prev":
            out[name] = baseline_prev(train, means)
        elif name == "knn":
            out[name] = baseline_knn(train, k, means)
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return out


def direct_evaluation(
    cfg: ExperimentConfig,
    raw_windows: Sequence[TimeSeriesWindow],
    imputers: Sequence[str] = ("sting", "mean", "prev", "knn"),
    state: Optional[TrainState] = None,
    out_dir: Optional[Union[str, Path]] = None,
    ratio: Optional[float] = None,
) -> DirectEvaluation:
    """Hide observed cells, train on the rest, score every imputer on the hidden cells."""
    train, targets, stats = prepare_holdout(cfg, raw_windows, ratio)
    rmse = {}
    metrics: list[dict] = []
    sha = None
    if "sting" in imputers:
        if state is None:
            state, metrics = fit(cfg, train, out_dir=out_dir)
        state.norm = stats
        if out_dir is not None:
            sha = save_state(Path(out_dir) / "checkpoint.bin", state, cfg)
        result = impute_windows(state, train, cfg)
        rmse["sting"] = rmse_heldout(result.x_hat, targets)
    baselines = [n for n in imputers if n != "sting"]
    for name, imputed in impute_baselines(train, baselines, cfg.knn_k).items():
        rmse[name] = rmse_heldout(imputed, targets)
    return DirectEvaluation(rmse, state, stats, train, targets, metrics, sha)


# ---------------------------------------------------------------------------
# ablation


ABLATIONS = ("full", "w/o attention", "w/o optimal z'", "w/o backward")


@dataclass
class AblationRow:
    variant: str
    rmse: float
    increase_pct: float
    checkpoint_sha256: str


def run_ablation(
    cfg: ExperimentConfig,
    raw_windows: Sequence[TimeSeriesWindow],
    out_dir: Optional[Union[str, Path]] = None,
) -> list[AblationRow]:
    """Full model and three single-component removals, each scored on one holdout.

    "w/o optimal z'" reuses the full model's checkpoint and only skips the
    noise search at inference.
    """
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        out_dir = tmp.name
    out = Path(out_dir)
    train, targets, stats = prepare_holdout(cfg, raw_windows)
    variants = {
        "full": cfg,
        "w/o attention": cfg.replace(use_attention=False),
        "w/o backward": cfg.replace(use_backward=False),
    }
    results, hashes = {}, {}
    try:
        for name, vcfg in variants.items():
            vdir = out / name.replace("/", "").replace(" ", "_").replace("'", "")
            vdir.mkdir(parents=True, exist_ok=True)
            state, _ = fit(vcfg, train)
            state.norm = stats
            hashes[name] = save_state(vdir / "checkpoint.bin", state, vcfg)
            results[name] = rmse_heldout(impute_windows(state, train, vcfg).x_hat, targets)
        full_ckpt = out / "full" / "checkpoint.bin"
        with open(full_ckpt, "rb") as fh:
            hashes["w/o optimal z'"] = hashlib.sha256(fh.read()).hexdigest()
        state, _ = load_state(full_ckpt)
        results["w/o optimal z'"] = rmse_heldout(
            impute_windows(state, train, cfg, search=False).x_hat, targets
        )
    finally:
        if tmp is not None:
            tmp.cleanup()
    base = results["full"]
    return [
        AblationRow(v, results[v], 100.0 * (results[v] - base) / base, hashes[v])
        for v in ABLATIONS
    ]


# ---------------------------------------------------------------------------
# downstream regression


class Regressor(nn.Module):
    """Two-layer GRU with dropout between layers and an affine per-step head."""

    def __init__(self, n_inputs: int, hidden: int = 64, dropout: float = 0.3):
        super().__init__()
        self.gru = nn.GRU(n_inputs, hidden, num_layers=2, dropout=dropout, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.gru(x)
        return self.head(out).squeeze(-1)


def train_regressor(
    inputs: np.ndarray,
    target: np.ndarray,
    seed: int,
    epochs: int = 20,
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> Regressor:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Regressor(inputs.shape[-1], hidden)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        x = torch.as_tensor(inputs, dtype=torch.float32)
        y = torch.as_tensor(target, dtype=torch.float32)
        g = torch.Generator().manual_seed(seed)
        model.train()
        for _ in range(epochs):
            perm = torch.randperm(len(x), generator=g)
            for i in range(0, len(x), batch_size):
                idx = perm[i : i + batch_size]
                loss = ((model(x[idx]) - y[idx]) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
    model.eval()
    return model


def predict_rmse(model: Regressor, inputs: np.ndarray, target: np.ndarray) -> float:
    with torch.no_grad():
        pred = model(torch.as_tensor(inputs, dtype=torch.float32)).double().numpy()
    return float(np.sqrt(np.mean((pred - target) ** 2)))


Imputer = Callable[[list, list, ExperimentConfig], np.ndarray]


def _sting_imputer(train, test, cfg):
    test_mask = np.stack([w.mask for w in test])
    if test_mask.all():
        log.info("test inputs are complete; nothing to impute")
        return np.stack([w.x_bar for w in test])
    state, _ = fit(cfg, train)
    return impute_windows(state, test, cfg).x_hat


def _mean_imputer(train, test, cfg):
    return baseline_mean(test, feature_means(train))


def _prev_imputer(train, test, cfg):
    return baseline_prev(test, feature_means(train))


def _knn_imputer(train, test, cfg):
    pool = list(test) + list(train)
    return baseline_knn(pool, cfg.knn_k, feature_means(train))[: len(test)]


IMPUTERS: dict[str, Imputer] = {
    "sting": _sting_imputer,
    "mean": _mean_imputer,
    "prev": _prev_imputer,
    "knn": _knn_imputer,
}


@dataclass
class DownstreamTable:
    ratios: list[float]
    rows: dict[str, list[float]]


def _to_windows(values: np.ndarray, timestamps: np.ndarray) -> list[TimeSeriesWindow]:
    return [window_from_arrays(ts, v) for ts, v in zip(timestamps, values)]


def downstream_eval(
    cfg: ExperimentConfig,
    raw_windows: Sequence[TimeSeriesWindow],
    imputers: Sequence[str] = ("sting", "mean", "prev", "knn"),
    ratios: Optional[Sequence[float]] = None,
    target: Optional[Union[int, str]] = None,
) -> DownstreamTable:
    """Regressor trained once on complete data, scored on imputed test inputs.

    The target column is never corrupted nor shown to the imputers. The
    ``ideal`` row feeds the uncorrupted test inputs.
    """
    ratios = list(cfg.downstream_ratios if ratios is None else ratios)
    windows = list(raw_windows)
    arr = stack_windows(windows)
    if not arr["mask"].all():
        raise ValueError("downstream evaluation needs a complete dataset")
    names = windows[0].feature_names or [f"x{d}" for d in range(arr["x_bar"].shape[-1])]
    D = len(names)
    if target is None:
        target = cfg.target_feature or D - 1
    if isinstance(target, str):
        if target.isdigit():
            target = int(target)
        elif target in names:
            target = names.index(target)
        else:
            raise ValueError(f"unknown target feature {target!r}")
    features = [d for d in range(D) if d != target]

    rng = np.random.default_rng(derive_seed(cfg.seed, "split"))
    perm = rng.permutation(len(windows))
    n_train = int(round(0.8 * len(windows)))
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    stats = fit_normalization([windows[i] for i in train_idx])
    values = normalize_array(arr["x_bar"], stats)
    stamps = np.stack([w.timestamps for w in windows])
    x_train, y_train = values[train_idx][..., features], values[train_idx][..., target]
    x_test, y_test = values[test_idx][..., features], values[test_idx][..., target]

    model = train_regressor(
        x_train, y_train, derive_seed(cfg.seed, "regressor"), cfg.regressor_epochs, cfg.regressor_hidden
    )
    ideal = predict_rmse(model, x_test, y_test)
    rows = {"ideal": [ideal] * len(ratios)}
    for name in imputers:
        rows[name] = []
    feat_names = [names[d] for d in features]
    for r in ratios:
        train_series = [
            RawSeries(ts, v, feat_names) for ts, v in zip(stamps[train_idx], x_train)
        ]
        test_series = [RawSeries(ts, v, feat_names) for ts, v in zip(stamps[test_idx], x_test)]
        train_c = corrupt_mcar(train_series, r, derive_seed(cfg.seed, f"corrupt-train-{r}"))
        test_c = corrupt_mcar(test_series, r, derive_seed(cfg.seed, f"corrupt-test-{r}"))
        train_w = [window_from_arrays(s.timestamps, s.values, feat_names) for s in train_c]
        test_w = [window_from_arrays(s.timestamps, s.values, feat_names) for s in test_c]
        for name in imputers:
            imputed = IMPUTERS[name](train_w, test_w, cfg)
            rows[name].append(predict_rmse(model, imputed, y_test))
            log.info("downstream ratio %.2f %s: %.5f", r, name, rows[name][-1])
    return DownstreamTable(ratios, rows)


# ---------------------------------------------------------------------------
# tables


def write_table(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def ablation_table(rows: Sequence[AblationRow]):
    header = ["variant", "rmse", "increase_pct", "checkpoint_sha256"]
    body = [
        [r.variant, r.rmse, f"{r.increase_pct:.1f}%", r.checkpoint_sha256[:16]] for r in rows
    ]
    return header, body


def downstream_rows(table: DownstreamTable):
    header = ["imputer", *[f"{r:g}" for r in table.ratios]]
    return header, [[name, *vals] for name, vals in table.rows.items()]
