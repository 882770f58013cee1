"""Directional generator: temporal decay, double GRU cell and attention wiring.

Tensors are batch-first: ``(batch, T, D)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from sting.attention import MultiHeadAttention, TemporalAttention, _uniform_


class NonFiniteError(RuntimeError):
    pass


def decay_rates(
    delta: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor
) -> torch.Tensor:
    """gamma = exp(-max(0, W delta + b)); every entry lies in (0, 1]."""
    return torch.exp(-torch.relu(delta @ weight.T + bias))


def apply_decay(h_prev: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    if h_prev.shape != gamma.shape:
        raise ValueError(f"shape mismatch: {tuple(h_prev.shape)} vs {tuple(gamma.shape)}")
    return gamma * h_prev


class TemporalDecay(nn.Module):
    def __init__(
        self, n_features: int, hidden_size: int, generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(hidden_size, n_features))
        self.bias = nn.Parameter(torch.zeros(hidden_size))
        _uniform_(self.weight, n_features, generator)
        # non-negative start keeps gamma non-increasing in delta
        with torch.no_grad():
            self.weight.abs_()

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        return decay_rates(delta, self.weight, self.bias)


class GruCell(nn.Module):
    """GRU cell with the reset gate applied before the recurrent product.

    Gate rows are stacked as (reset, update, new) in ``w_ih`` and ``w_hh``.
    """

    def __init__(
        self, input_size: int, hidden_size: int, generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_ih = nn.Parameter(torch.empty(3 * hidden_size, input_size))
        self.w_hh = nn.Parameter(torch.empty(3 * hidden_size, hidden_size))
        self.bias = nn.Parameter(torch.zeros(3 * hidden_size))
        _uniform_(self.w_ih, input_size, generator)
        _uniform_(self.w_hh, hidden_size, generator)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(
                f"gru_step got x width {x.shape[-1]} / h width {h.shape[-1]}, "
                f"expected {self.input_size} / {self.hidden_size}"
            )
        return self.from_input_gates(x @ self.w_ih.T + self.bias, h)

    def from_input_gates(self, gi: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Finish a step given the precomputed ``W x + b`` block."""
        H = self.hidden_size
        gh = h @ self.w_hh[: 2 * H].T
        r = torch.sigmoid(gi[..., :H] + gh[..., :H])
        u = torch.sigmoid(gi[..., H : 2 * H] + gh[..., H:])
        n = torch.tanh(gi[..., 2 * H :] + (r * h) @ self.w_hh[2 * H :].T)
        return (1 - u) * n + u * h


def gru_step(x_in: torch.Tensor, h_prev: torch.Tensor, params: GruCell) -> torch.Tensor:
    return params(x_in, h_prev)


@dataclass
class GeneratorOutput:
    x_hat_raw: torch.Tensor
    x_hat_refined: torch.Tensor
    h: torch.Tensor
    hg: torch.Tensor


def refine(x_bar: torch.Tensor, mask: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Observed cells take the observed value exactly."""
    return torch.where(mask > 0, x_bar, x_hat)


class Generator(nn.Module):
    """One directional generator.

    ``use_attention=False`` drops both attention modules; the GRU cells
    then read the step vector alone.
    """

    def __init__(
        self,
        n_features: int,
        hidden_size: int = 64,
        n_heads: int = 4,
        use_attention: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.n_features = n_features
        self.hidden_size = hidden_size
        self.use_attention = use_attention
        in_size = n_features
        if use_attention:
            self.self_attn = MultiHeadAttention(n_features, n_heads, generator=generator)
            self.temporal_attn = TemporalAttention(
                hidden_size, n_features, n_heads, generator=generator
            )
            in_size = 2 * n_features
        self.decay = TemporalDecay(n_features, hidden_size, generator)
        self.main_cell = GruCell(in_size, hidden_size, generator)
        self.gen_cell = GruCell(in_size, hidden_size, generator)
        self.output = nn.Linear(hidden_size, n_features)
        _uniform_(self.output.weight, hidden_size, generator)
        nn.init.zeros_(self.output.bias)

    def forward(
        self,
        x_bar: torch.Tensor,
        mask: torch.Tensor,
        delta: torch.Tensor,
        noise: torch.Tensor,
    ) -> GeneratorOutput:
        if not (x_bar.shape == mask.shape == delta.shape == noise.shape):
            raise ValueError(
                "x_bar, mask, delta and noise must share one shape, got "
                f"{tuple(x_bar.shape)}, {tuple(mask.shape)}, "
                f"{tuple(delta.shape)}, {tuple(noise.shape)}"
            )
        if x_bar.shape[-1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {x_bar.shape[-1]}"
            )
        T = x_bar.shape[-2]
        batch = x_bar.shape[:-2]
        x_tilde = torch.where(mask > 0, x_bar, noise)
        if self.use_attention:
            context = self.self_attn(x_tilde, x_tilde, x_tilde).values
            keys, values = self.temporal_attn.prepare(context)

        gammas = self.decay(delta)
        # both cells read the same input, so their input projections fuse
        w_in = torch.cat([self.main_cell.w_ih, self.gen_cell.w_ih]).T
        b_in = torch.cat([self.main_cell.bias, self.gen_cell.bias])
        H3 = 3 * self.hidden_size

        h = x_bar.new_zeros(*batch, self.hidden_size)
        hg = x_bar.new_zeros(*batch, self.hidden_size)
        step_in = x_tilde[..., 0, :]
        outs, hs, hgs = [], [], []
        for t in range(T):
            h = gammas[..., t, :] * h
            if self.use_attention:
                a = self.temporal_attn.step(h, keys, values)
                x_in = torch.cat([step_in, a], dim=-1)
            else:
                x_in = step_in
            gi = x_in @ w_in + b_in
            h = self.main_cell.from_input_gates(gi[..., :H3], h)
            hg = self.gen_cell.from_input_gates(gi[..., H3:], hg)
            x_hat_t = self.output(hg)
            outs.append(x_hat_t)
            hs.append(h)
            hgs.append(hg)
            # generated value goes forward, swapped for the observed one where known
            step_in = torch.where(mask[..., t, :] > 0, x_bar[..., t, :], x_hat_t)

        x_hat = torch.stack(outs, dim=-2)
        if not torch.isfinite(x_hat).all():
            bad = (~torch.isfinite(x_hat)).reshape(-1, T, self.n_features)
            step = int(bad.any(dim=(0, 2)).nonzero()[0])
            raise NonFiniteError(f"generator produced a non-finite value at step {step}")
        return GeneratorOutput(
            x_hat,
            refine(x_bar, mask, x_hat),
            torch.stack(hs, dim=-2),
            torch.stack(hgs, dim=-2),
        )


def generate_sequence(
    gen: Generator,
    x_bar: torch.Tensor,
    mask: torch.Tensor,
    delta: torch.Tensor,
    noise: torch.Tensor,
    direction: str = "forward",
) -> GeneratorOutput:
    """Run ``gen`` in the given time direction.

    For ``backward``, ``delta`` must already be the lag matrix of the
    reversed sequence expressed in the original time order (see
    ``sting.data.build_delta_backward``); everything is flipped, run, and
    flipped back.
    """
    if direction == "forward":
        return gen(x_bar, mask, delta, noise)
    if direction != "backward":
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    dim = -2
    out = gen(
        x_bar.flip(dim), mask.flip(dim), delta.flip(dim), noise.flip(dim)
    )
    return GeneratorOutput(
        out.x_hat_raw.flip(dim),
        out.x_hat_refined.flip(dim),
        out.h.flip(dim),
        out.hg.flip(dim),
    )


def _reduce_dims(x: torch.Tensor, per_sample: bool):
    return tuple(range(-2, 0)) if per_sample else tuple(range(x.dim()))


def loss_reconstruction(
    x: torch.Tensor, x_hat_raw: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    """Mean squared error over observed cells (0 when nothing is observed)."""
    dims = _reduce_dims(x, per_sample)
    sq = mask * (x - x_hat_raw) ** 2
    return sq.sum(dim=dims) / mask.sum(dim=dims).clamp(min=1)


def loss_consistency(
    x_hat_fwd: torch.Tensor, x_hat_bwd: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    if x_hat_fwd.shape != x_hat_bwd.shape:
        raise ValueError("forward and backward outputs differ in shape")
    return (x_hat_fwd - x_hat_bwd).abs().mean(dim=_reduce_dims(x_hat_fwd, per_sample))


def loss_generator_adversarial(
    m_hat: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    """Negative mean discriminator score over originally-missing cells."""
    dims = _reduce_dims(mask, per_sample)
    fake = 1 - mask
    return -(m_hat * fake).sum(dim=dims) / fake.sum(dim=dims).clamp(min=1)


def loss_generator_total(L_R, L_C, L_W, lambda_r: float = 10.0, lambda_c: float = 1.0):
    """``L_R`` and ``L_W`` are already summed over both directions."""
    return lambda_r * L_R + lambda_c * L_C + L_W


def count_parameters(module: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in module.parameters())
