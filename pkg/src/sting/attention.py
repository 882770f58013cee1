"""Scaled dot-product and multi-head attention.

Two uses inside a generator: self-attention over the noise-filled input
sequence (producing one context vector per step) and temporal attention,
where the decayed hidden state queries those context vectors.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import torch
import torch.nn as nn


class AttentionOutput(NamedTuple):
    values: torch.Tensor
    weights: torch.Tensor


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> AttentionOutput:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Leading axes are treated as batch axes.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key/value length mismatch: {k.shape[-2]} vs {v.shape[-2]}"
        )
    d_k = q.shape[-1]
    if d_k < 1:
        raise ValueError("d_k must be >= 1")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    # torch.softmax subtracts the row max internally
    weights = torch.softmax(scores, dim=-1)
    return AttentionOutput(weights @ v, weights)


def _uniform_(t: torch.Tensor, fan_in: int, generator: Optional[torch.Generator]):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)


class MultiHeadAttention(nn.Module):
    """Multi-head attention without biases.

    Per-head width is ``ceil(d_model / n_heads)``; the output projection maps
    the concatenated heads (``n_heads * d_head`` wide) back to ``d_model``.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int = 4,
        d_head: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_head or math.ceil(d_model / n_heads)
        shape = (n_heads, d_model, self.d_head)
        self.w_q = nn.Parameter(torch.empty(shape))
        self.w_k = nn.Parameter(torch.empty(shape))
        self.w_v = nn.Parameter(torch.empty(shape))
        self.w_o = nn.Parameter(torch.empty(n_heads * self.d_head, d_model))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for w in (self.w_q, self.w_k, self.w_v):
            _uniform_(w, self.d_model, generator)
        _uniform_(self.w_o, self.n_heads * self.d_head, generator)

    def _check(self, x: torch.Tensor, name: str) -> None:
        if x.shape[-1] != self.d_model:
            raise ValueError(
                f"{name} has width {x.shape[-1]}, expected d_model={self.d_model}"
            )

    def project_kv(self, k: torch.Tensor, v: torch.Tensor):
        """Per-head keys and values, shape (..., h, n_k, d_head)."""
        self._check(k, "K")
        self._check(v, "V")
        keys = torch.einsum("...nd,hde->...hne", k, self.w_k)
        values = torch.einsum("...nd,hde->...hne", v, self.w_v)
        return keys, values

    def attend_projected(
        self, q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
    ) -> AttentionOutput:
        self._check(q, "Q")
        queries = torch.einsum("...nd,hde->...hne", q, self.w_q)
        heads, weights = scaled_dot_attention(queries, keys, values)
        # (..., h, n_q, d_head) -> (..., n_q, h * d_head)
        heads = heads.transpose(-3, -2)
        heads = heads.reshape(*heads.shape[:-2], self.n_heads * self.d_head)
        return AttentionOutput(heads @ self.w_o, weights)

    def forward(
        self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
    ) -> AttentionOutput:
        keys, values = self.project_kv(k, v)
        return self.attend_projected(q, keys, values)


def multi_head(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, params: MultiHeadAttention
) -> torch.Tensor:
    return params(q, k, v).values


def self_attend(sequence: torch.Tensor, params: MultiHeadAttention) -> torch.Tensor:
    """Context vectors for every step of ``sequence`` (..., T, d_model)."""
    if sequence.shape[-2] < 1:
        raise ValueError("sequence must have at least one step")
    return params(sequence, sequence, sequence).values


class TemporalAttention(nn.Module):
    """Hidden state attends over precomputed context vectors.

    The hidden state is mapped to ``d_model`` by a trainable affine query
    projection, then used as a single-row query.
    """

    def __init__(
        self,
        hidden_size: int,
        d_model: int,
        n_heads: int = 4,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.query = nn.Linear(hidden_size, d_model)
        _uniform_(self.query.weight, hidden_size, generator)
        nn.init.zeros_(self.query.bias)
        self.mha = MultiHeadAttention(d_model, n_heads, generator=generator)

    def prepare(self, context: torch.Tensor):
        """Keys and values laid out as (..., h, d_head, T) for :meth:`step`."""
        keys, values = self.mha.project_kv(context, context)
        return keys.transpose(-1, -2).contiguous(), values.transpose(-1, -2).contiguous()

    def step(
        self, state: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
    ) -> torch.Tensor:
        """One query row per batch item; ``keys``/``values`` from :meth:`prepare`."""
        mha = self.mha
        q = self.query(state)
        w_q = mha.w_q.permute(1, 0, 2).reshape(mha.d_model, -1)
        q = (q @ w_q).reshape(*q.shape[:-1], mha.n_heads, mha.d_head, 1)
        # broadcast along the contiguous time axis; far cheaper than many
        # tiny batched matmuls for a single query row
        scores = (keys * q).sum(-2) / math.sqrt(mha.d_head)
        weights = torch.softmax(scores, dim=-1)
        heads = (values * weights.unsqueeze(-2)).sum(-1)
        return heads.reshape(*heads.shape[:-2], -1) @ mha.w_o

    def forward(self, state: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        keys, values = self.prepare(context)
        return self.step(state, keys, values)


def temporal_attend(
    query_state: torch.Tensor, context: torch.Tensor, params: TemporalAttention
) -> torch.Tensor:
    return params(query_state, context)
