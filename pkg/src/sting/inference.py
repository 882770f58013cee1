"""Per-window noise search with frozen weights, then bidirectional imputation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from sting.config import ExperimentConfig, derive_seed
from sting.data import TimeSeriesWindow, stack_windows
from sting.discriminator import sample_hint
from sting.generator import Generator, generate_sequence, refine
from sting.training import Batch, TrainState, generate, generator_losses, sample_noise, to_batch

log = logging.getLogger(__name__)


@dataclass
class SearchResult:
    z: torch.Tensor
    loss: torch.Tensor
    initial_loss: torch.Tensor
    iterations: int
    nonfinite: bool = False


def search_noise(
    objective: Callable[[torch.Tensor], torch.Tensor],
    z_init: torch.Tensor,
    iterations: int = 100,
    step_size: float = 0.01,
) -> SearchResult:
    """Gradient descent on ``z``; returns the best iterate seen.

    ``objective`` maps ``z`` to one loss per sample (leading axis) or to a
    scalar. Samples are tracked independently, so each keeps its own best
    iterate. A non-finite loss or gradient stops the search early.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    z = z_init.detach().clone()
    best_z = z.clone()
    best_loss = None
    initial = None
    nonfinite = False
    done = 0
    for it in range(iterations + 1):
        z.requires_grad_(it < iterations and step_size != 0)
        loss = objective(z)
        per = loss.detach().reshape(-1) if loss.dim() else loss.detach().reshape(1)
        if not torch.isfinite(per).all():
            nonfinite = True
            break
        if best_loss is None:
            initial = per.clone()
            best_loss = per.clone()
        else:
            better = per < best_loss
            if better.any():
                best_loss = torch.where(better, per, best_loss)
                sel = better.reshape(-1, *([1] * (z.dim() - 1))) if per.numel() > 1 else better
                best_z = torch.where(sel, z.detach(), best_z)
        if it == iterations or step_size == 0:
            break
        (grad,) = torch.autograd.grad(loss.sum(), z)
        if not torch.isfinite(grad).all():
            nonfinite = True
            break
        z = (z.detach() - step_size * grad).detach()
        done += 1
    if nonfinite:
        log.warning("noise search hit a non-finite value after %d iterations", done)
    if best_loss is None:
        best_loss = initial = torch.full((1,), float("nan"))
    return SearchResult(best_z, best_loss, initial, done, nonfinite)


def sting_objective(
    state: TrainState, batch: Batch, hint: torch.Tensor, cfg: ExperimentConfig
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Per-window generator loss (reconstruction, consistency, adversarial)."""

    def objective(z: torch.Tensor) -> torch.Tensor:
        out_f, out_b = generate(state, batch, z)
        return generator_losses(state, batch, out_f, out_b, cfg, hint, per_sample=True)["L_G"]

    return objective


@dataclass
class ImputationResult:
    """``x_hat`` is the final matrix; ``provenance`` is 1 where generated."""

    x_hat: np.ndarray
    provenance: np.ndarray
    forward: np.ndarray
    backward: Optional[np.ndarray]
    out_of_range: np.ndarray
    search_loss_initial: Optional[np.ndarray] = None
    search_loss_final: Optional[np.ndarray] = None


def impute(
    batch: Batch,
    gen_fwd: Generator,
    gen_bwd: Optional[Generator],
    z: torch.Tensor,
) -> ImputationResult:
    """Average the refined outputs of both directions and refine again."""
    if z.shape != batch.x_bar.shape:
        raise ValueError(f"noise shape {tuple(z.shape)} != data shape {tuple(batch.x_bar.shape)}")
    with torch.no_grad():
        out_f = generate_sequence(gen_fwd, batch.x_bar, batch.mask, batch.delta, z)
        fwd = out_f.x_hat_refined
        bwd = None
        x_hat = fwd
        if gen_bwd is not None:
            bwd = generate_sequence(
                gen_bwd, batch.x_bar, batch.mask, batch.delta_backward, z, "backward"
            ).x_hat_refined
            x_hat = refine(batch.x_bar, batch.mask, (fwd + bwd) / 2)
    x_np = x_hat.numpy().astype(np.float64)
    missing = (batch.mask.numpy() == 0)
    return ImputationResult(
        x_hat=x_np,
        provenance=missing.astype(np.int8),
        forward=fwd.numpy().astype(np.float64),
        backward=None if bwd is None else bwd.numpy().astype(np.float64),
        out_of_range=missing & ((x_np < 0) | (x_np > 1)),
    )


def impute_windows(
    state: TrainState,
    windows: Sequence[TimeSeriesWindow],
    cfg: ExperimentConfig,
    search: Optional[bool] = None,
    chunk_size: int = 512,
) -> ImputationResult:
    """Impute normalized windows, searching noise per window when enabled."""
    search = cfg.noise_search if search is None else search
    arrays = stack_windows(windows)
    full = to_batch(arrays, state.dtype)
    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "inference"))
    for m in (state.gen_fwd, state.gen_bwd, state.disc):
        if m is not None:
            m.eval()
            m.requires_grad_(False)
    parts, inits, finals = [], [], []
    try:
        for start in range(0, len(full), chunk_size):
            batch = full.index(slice(start, start + chunk_size))
            z = sample_noise(batch.x_bar.shape, rng, cfg.noise_sd, state.dtype)
            hint = sample_hint(batch.mask, cfg.hint_ratio, rng)
            if search and cfg.search_iterations > 0 and bool((batch.mask == 0).any()):
                res = search_noise(
                    sting_objective(state, batch, hint, cfg),
                    z,
                    cfg.search_iterations,
                    cfg.search_step,
                )
                z = res.z
                inits.append(res.initial_loss.numpy())
                finals.append(res.loss.numpy())
            parts.append(impute(batch, state.gen_fwd, state.gen_bwd, z))
    finally:
        for m in (state.gen_fwd, state.gen_bwd, state.disc):
            if m is not None:
                m.train()
                m.requires_grad_(True)
    out = ImputationResult(
        x_hat=np.concatenate([p.x_hat for p in parts]),
        provenance=np.concatenate([p.provenance for p in parts]),
        forward=np.concatenate([p.forward for p in parts]),
        backward=None
        if parts[0].backward is None
        else np.concatenate([p.backward for p in parts]),
        out_of_range=np.concatenate([p.out_of_range for p in parts]),
    )
    # observed cells come from the float64 inputs, not the model-precision copy
    out.x_hat = np.where(arrays["mask"] > 0, arrays["x_bar"], out.x_hat)
    if inits:
        out.search_loss_initial = np.concatenate(inits)
        out.search_loss_final = np.concatenate(finals)
    if out.out_of_range.any():
        log.info("%d imputed cells fall outside [0, 1]", int(out.out_of_range.sum()))
    return out
