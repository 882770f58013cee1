"""Generator pre-training, alternating adversarial updates, checkpoint and resume."""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from sting import checkpoint
from sting.config import ExperimentConfig, derive_seed
from sting.data import NormalizationStats, TimeSeriesWindow, stack_windows
from sting.discriminator import Discriminator, loss_discriminator, sample_hint
from sting.generator import (
    Generator,
    GeneratorOutput,
    generate_sequence,
    loss_consistency,
    loss_generator_adversarial,
    loss_reconstruction,
)

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_R_fwd", "L_R_bwd", "L_C", "L_W_fwd", "L_W_bwd", "L_G", "L_D")


class NonFiniteLossError(RuntimeError):
    pass


class Batch(NamedTuple):
    x_bar: torch.Tensor
    mask: torch.Tensor
    delta: torch.Tensor
    delta_backward: torch.Tensor

    def __len__(self):
        return self.x_bar.shape[0]

    def index(self, idx) -> "Batch":
        return Batch(*(t[idx] for t in self))


def to_batch(
    windows: Union[Sequence[TimeSeriesWindow], dict], dtype=torch.float32
) -> Batch:
    arrays = windows if isinstance(windows, dict) else stack_windows(windows)
    return Batch(
        *(
            torch.as_tensor(arrays[k], dtype=dtype)
            for k in ("x_bar", "mask", "delta", "delta_backward")
        )
    )


@dataclass
class TrainState:
    gen_fwd: Generator
    gen_bwd: Optional[Generator]
    disc: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    g_updates: int = 0
    d_updates: int = 0
    history: list = field(default_factory=list)
    norm: Optional[NormalizationStats] = None

    @property
    def generators(self) -> list[Generator]:
        return [g for g in (self.gen_fwd, self.gen_bwd) if g is not None]

    @property
    def dtype(self) -> torch.dtype:
        return self.gen_fwd.output.weight.dtype


def init_state(
    cfg: ExperimentConfig, n_features: int, dtype: torch.dtype = torch.float32
) -> TrainState:
    init_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "init"))
    gen_fwd = Generator(
        n_features, cfg.hidden_size, cfg.n_heads, cfg.use_attention, generator=init_gen
    )
    gen_bwd = (
        Generator(n_features, cfg.hidden_size, cfg.n_heads, cfg.use_attention, generator=init_gen)
        if cfg.use_backward
        else None
    )
    disc = Discriminator(n_features, cfg.disc_hidden_size, generator=init_gen)
    for m in (gen_fwd, gen_bwd, disc):
        if m is not None:
            m.to(dtype)
    g_params = [p for g in (gen_fwd, gen_bwd) if g is not None for p in g.parameters()]
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr_g, betas=(0.9, 0.999), eps=1e-8)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.9, 0.999), eps=1e-8)
    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "train"))
    return TrainState(gen_fwd, gen_bwd, disc, opt_g, opt_d, rng)


def sample_noise(shape, rng: torch.Generator, sd: float, dtype) -> torch.Tensor:
    return sd * torch.randn(shape, generator=rng, dtype=dtype)


def generate(state: TrainState, batch: Batch, noise: torch.Tensor):
    out_f = generate_sequence(state.gen_fwd, batch.x_bar, batch.mask, batch.delta, noise)
    out_b = None
    if state.gen_bwd is not None:
        out_b = generate_sequence(
            state.gen_bwd, batch.x_bar, batch.mask, batch.delta_backward, noise, "backward"
        )
    return out_f, out_b


def _score(disc: Discriminator, outs: list[torch.Tensor], hint: torch.Tensor):
    """One discriminator pass over all directions stacked along the batch axis."""
    n = len(outs)
    scores = disc(torch.cat(outs), hint.repeat(n, *([1] * (hint.dim() - 1))))
    return scores.chunk(n)


def generator_losses(
    state: TrainState,
    batch: Batch,
    out_f: GeneratorOutput,
    out_b: Optional[GeneratorOutput],
    cfg: ExperimentConfig,
    hint: Optional[torch.Tensor] = None,
    per_sample: bool = False,
) -> dict[str, torch.Tensor]:
    """Reconstruction, consistency and (when ``hint`` is given) adversarial terms.

    ``L_G`` sums the per-direction terms, with the consistency term counted once.
    """
    x, m = batch.x_bar, batch.mask
    out = {"L_R_fwd": loss_reconstruction(x, out_f.x_hat_raw, m, per_sample)}
    total = cfg.lambda_r * out["L_R_fwd"]
    if out_b is not None:
        out["L_R_bwd"] = loss_reconstruction(x, out_b.x_hat_raw, m, per_sample)
        out["L_C"] = loss_consistency(out_f.x_hat_raw, out_b.x_hat_raw, per_sample)
        total = total + cfg.lambda_r * out["L_R_bwd"] + cfg.lambda_c * out["L_C"]
    if hint is not None:
        refined = [out_f.x_hat_refined] + ([out_b.x_hat_refined] if out_b is not None else [])
        scores = _score(state.disc, refined, hint)
        out["L_W_fwd"] = loss_generator_adversarial(scores[0], m, per_sample)
        total = total + out["L_W_fwd"]
        if out_b is not None:
            out["L_W_bwd"] = loss_generator_adversarial(scores[1], m, per_sample)
            total = total + out["L_W_bwd"]
    out["L_G"] = total
    return out


def _check_finite(losses: dict[str, torch.Tensor], step: int) -> None:
    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"{name} is not finite at step {step}")


def _clip(params, max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _record(state: TrainState, phase: str, losses: dict[str, torch.Tensor]) -> dict:
    rec = {"step": state.step, "phase": phase}
    for k in LOSS_KEYS:
        rec[k] = float(losses[k].detach()) if k in losses else None
    state.history.append(rec)
    state.step += 1
    return rec


def _g_params(state: TrainState):
    return [p for g in state.generators for p in g.parameters()]


def pretrain_step(state: TrainState, batch: Batch, cfg: ExperimentConfig) -> dict:
    noise = sample_noise(batch.x_bar.shape, state.rng, cfg.noise_sd, state.dtype)
    out_f, out_b = generate(state, batch, noise)
    losses = generator_losses(state, batch, out_f, out_b, cfg)
    _check_finite(losses, state.step)
    state.opt_g.zero_grad()
    losses["L_G"].backward()
    _clip(_g_params(state), cfg.grad_clip)
    state.opt_g.step()
    state.g_updates += 1
    return _record(state, "pretrain", losses)


def train_step(state: TrainState, batch: Batch, cfg: ExperimentConfig) -> dict:
    """One discriminator update, then one generator update."""
    noise = sample_noise(batch.x_bar.shape, state.rng, cfg.noise_sd, state.dtype)
    hint = sample_hint(batch.mask, cfg.hint_ratio, state.rng)
    out_f, out_b = generate(state, batch, noise)

    fakes = [out_f.x_hat_refined.detach()]
    if out_b is not None:
        fakes.append(out_b.x_hat_refined.detach())
    scores = _score(state.disc, fakes, hint)
    L_D = torch.stack([loss_discriminator(s, batch.mask) for s in scores]).mean()
    _check_finite({"L_D": L_D}, state.step)
    state.opt_d.zero_grad()
    L_D.backward()
    _clip(state.disc.parameters(), cfg.grad_clip)
    state.opt_d.step()
    state.d_updates += 1
    if cfg.weight_clip > 0:
        with torch.no_grad():
            for p in state.disc.parameters():
                p.clamp_(-cfg.weight_clip, cfg.weight_clip)

    state.disc.requires_grad_(False)
    try:
        losses = generator_losses(state, batch, out_f, out_b, cfg, hint)
    finally:
        state.disc.requires_grad_(True)
    _check_finite(losses, state.step)
    state.opt_g.zero_grad()
    losses["L_G"].backward()
    _clip(_g_params(state), cfg.grad_clip)
    state.opt_g.step()
    state.g_updates += 1
    losses["L_D"] = L_D.detach()
    return _record(state, "adversarial", losses)


def _batches(n: int, batch_size: int, rng: torch.Generator):
    perm = torch.randperm(n, generator=rng)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _epoch_record(state: TrainState, records: list[dict], phase: str, t0: float, cfg) -> dict:
    rec = {"epoch": state.epoch, "step": state.step, "phase": phase}
    for k in LOSS_KEYS:
        vals = [r[k] for r in records if r[k] is not None]
        rec[k] = sum(vals) / len(vals) if vals else None
    rec["wall_time"] = round(time.perf_counter() - t0, 3) if cfg.log_wall_time else None
    return rec


def run_epoch(state: TrainState, data: Batch, cfg: ExperimentConfig, phase: str) -> dict:
    if len(data) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    step_fn = pretrain_step if phase == "pretrain" else train_step
    records = [
        step_fn(state, data.index(idx), cfg)
        for idx in _batches(len(data), cfg.batch_size, state.rng)
    ]
    rec = _epoch_record(state, records, phase, t0, cfg)
    state.epoch += 1
    return rec


def pretrain_generators(state: TrainState, data: Batch, epochs: int, cfg: ExperimentConfig):
    """Generator-only epochs on the reconstruction and consistency losses."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if len(data) == 0:
        raise ValueError("empty dataset")
    return state, [run_epoch(state, data, cfg, "pretrain") for _ in range(epochs)]


def fit(
    cfg: ExperimentConfig,
    windows: Union[Sequence[TimeSeriesWindow], Batch],
    state: Optional[TrainState] = None,
    out_dir: Optional[Union[str, Path]] = None,
    stop_after_epoch: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[TrainState, list[dict]]:
    """Pre-train, then adversarial epochs; resumes from ``state.epoch``.

    With ``out_dir`` set, per-epoch records are appended to ``metrics.jsonl``
    and the state is written to ``checkpoint.bin`` (also every
    ``cfg.checkpoint_every`` epochs when positive).
    """
    data = windows if isinstance(windows, Batch) else to_batch(windows, dtype)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if state is None:
        state = init_state(cfg, data.x_bar.shape[-1], dtype)
    data = Batch(*(t.to(state.dtype) for t in data))
    total = cfg.pretrain_epochs + cfg.epochs
    last = total if stop_after_epoch is None else min(total, stop_after_epoch)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics = []
    while state.epoch < last:
        phase = "pretrain" if state.epoch < cfg.pretrain_epochs else "adversarial"
        rec = run_epoch(state, data, cfg, phase)
        metrics.append(rec)
        log.info(
            "epoch %d (%s): L_G=%.5f L_D=%s", rec["epoch"], phase, rec["L_G"], rec["L_D"]
        )
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_state(out / "checkpoint.bin", state, cfg)
    if out is not None:
        save_state(out / "checkpoint.bin", state, cfg)
    return state, metrics


def _opt_tensors(opt: torch.optim.Optimizer, prefix: str):
    tensors, steps = {}, {}
    for idx, st in opt.state_dict()["state"].items():
        tensors[f"{prefix}.{idx}.exp_avg"] = st["exp_avg"]
        tensors[f"{prefix}.{idx}.exp_avg_sq"] = st["exp_avg_sq"]
        steps[str(idx)] = float(st["step"])
    return tensors, steps


def _load_opt(opt: torch.optim.Optimizer, tensors, steps: dict, prefix: str, dtype):
    sd = opt.state_dict()
    state = {}
    for key, step in steps.items():
        idx = int(key)
        state[idx] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}.{idx}.exp_avg"]).to(dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}.{idx}.exp_avg_sq"]).to(dtype),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


def state_payload(state: TrainState, cfg: ExperimentConfig):
    tensors = checkpoint.module_tensors(state.gen_fwd, "gen_fwd")
    if state.gen_bwd is not None:
        tensors.update(checkpoint.module_tensors(state.gen_bwd, "gen_bwd"))
    tensors.update(checkpoint.module_tensors(state.disc, "disc"))
    g_t, g_steps = _opt_tensors(state.opt_g, "opt_g")
    d_t, d_steps = _opt_tensors(state.opt_d, "opt_d")
    tensors.update(g_t)
    tensors.update(d_t)
    manifest = {
        "format": 1,
        # where a run was written is not part of the model
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
        "n_features": state.gen_fwd.n_features,
        "dtype": str(state.dtype).replace("torch.", ""),
        "epoch": state.epoch,
        "step": state.step,
        "g_updates": state.g_updates,
        "d_updates": state.d_updates,
        "opt_g_steps": g_steps,
        "opt_d_steps": d_steps,
        "rng_state": base64.b64encode(state.rng.get_state().numpy().tobytes()).decode(),
        "history": state.history,
        "normalization": state.norm.to_dict() if state.norm is not None else None,
    }
    return tensors, manifest


def save_state(path: Union[str, Path], state: TrainState, cfg: ExperimentConfig) -> str:
    """Write ``state`` to ``path``; returns the file's sha256."""
    tensors, manifest = state_payload(state, cfg)
    return checkpoint.save(path, tensors, manifest)


def load_state(path: Union[str, Path]) -> tuple[TrainState, ExperimentConfig]:
    tensors, manifest = checkpoint.load(path)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    state = init_state(cfg, manifest["n_features"], dtype)
    checkpoint.load_module(state.gen_fwd, tensors, "gen_fwd")
    if state.gen_bwd is not None:
        checkpoint.load_module(state.gen_bwd, tensors, "gen_bwd")
    elif any(k.startswith("gen_bwd.") for k in tensors):
        raise checkpoint.CheckpointError("checkpoint has a backward generator; config disables it")
    checkpoint.load_module(state.disc, tensors, "disc")
    _load_opt(state.opt_g, tensors, manifest["opt_g_steps"], "opt_g", dtype)
    _load_opt(state.opt_d, tensors, manifest["opt_d_steps"], "opt_d", dtype)
    rng_bytes = base64.b64decode(manifest["rng_state"])
    state.rng.set_state(torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy()))
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.g_updates = manifest["g_updates"]
    state.d_updates = manifest["d_updates"]
    state.history = manifest["history"]
    if manifest.get("normalization"):
        state.norm = NormalizationStats.from_dict(manifest["normalization"])
    return state, cfg


def param_vector(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])

