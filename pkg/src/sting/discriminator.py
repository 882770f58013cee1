"""Hint sampling, the per-element GRU discriminator and its loss."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from sting.attention import _uniform_
from sting.generator import GruCell


def sample_hint(
    mask: torch.Tensor, hint_ratio: float, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Reveal each mask cell independently with probability ``hint_ratio``.

    Unrevealed cells are 0.5.
    """
    if not 0.0 <= hint_ratio <= 1.0:
        raise ValueError(f"hint_ratio must lie in [0, 1], got {hint_ratio}")
    reveal = torch.rand(mask.shape, generator=generator, dtype=torch.float64) < hint_ratio
    return torch.where(reveal, mask, torch.full_like(mask, 0.5))


class Discriminator(nn.Module):
    """Forward-time GRU over ``concat(x_hat_t, hint_t)``, affine head, sigmoid."""

    def __init__(
        self,
        n_features: int,
        hidden_size: int = 64,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.n_features = n_features
        self.hidden_size = hidden_size
        self.cell = GruCell(2 * n_features, hidden_size, generator)
        self.head = nn.Linear(hidden_size, n_features)
        _uniform_(self.head.weight, hidden_size, generator)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_hat: torch.Tensor, hint: torch.Tensor) -> torch.Tensor:
        if x_hat.shape != hint.shape:
            raise ValueError(
                f"x_hat {tuple(x_hat.shape)} and hint {tuple(hint.shape)} differ"
            )
        if x_hat.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x_hat.shape[-1]}")
        if not torch.isfinite(x_hat).all():
            raise ValueError("discriminator input contains non-finite values")
        inputs = torch.cat([x_hat, hint], dim=-1)
        h = x_hat.new_zeros(*x_hat.shape[:-2], self.hidden_size)
        hs = []
        for t in range(x_hat.shape[-2]):
            h = self.cell(inputs[..., t, :], h)
            hs.append(h)
        return torch.sigmoid(self.head(torch.stack(hs, dim=-2)))


def discriminate(x_hat_refined: torch.Tensor, hint: torch.Tensor, params: Discriminator):
    return params(x_hat_refined, hint)


def discriminator_terms(
    m_hat: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean score over generated cells and over observed cells.

    An empty group contributes 0.
    """
    if m_hat.shape != mask.shape:
        raise ValueError("m_hat and mask differ in shape")
    dims = (-2, -1) if per_sample else tuple(range(mask.dim()))
    fake = 1 - mask
    fake_term = (m_hat * fake).sum(dim=dims) / fake.sum(dim=dims).clamp(min=1)
    real_term = (m_hat * mask).sum(dim=dims) / mask.sum(dim=dims).clamp(min=1)
    return fake_term, real_term


def loss_discriminator(
    m_hat: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    """Mean score on generated cells minus mean score on observed cells."""
    fake_term, real_term = discriminator_terms(m_hat, mask, per_sample)
    return fake_term - real_term
