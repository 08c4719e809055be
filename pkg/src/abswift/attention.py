"""Attention mechanisms: self, cross, and anchor attention with axial RoPE.

All three variants share one implementation: queries come from one sequence,
keys/values from another (possibly an anchor subset of the same sequence).
Query rows never interact, so the computation can be chunked over queries
with O(chunk * n_kv) working memory and bit-stable results per row.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .nn import Gelu, gelu

ROPE_BASE = 10000.0


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last dimension with max subtraction."""
    if torch.isnan(logits).any():
        raise ValueError("softmax_rows: NaN in logits")
    m = logits.max(dim=-1, keepdim=True).values
    e = torch.exp(logits - m)
    return e / e.sum(dim=-1, keepdim=True)


def axial_pair_counts(n_pairs: int) -> list[int]:
    """Split feature pairs across the 3 spatial axes, extras to leading axes."""
    base, rem = divmod(n_pairs, 3)
    return [base + (1 if a < rem else 0) for a in range(3)]


def rope_angles(positions: torch.Tensor, d_head: int) -> torch.Tensor:
    """Rotation angles of shape (n, d_head // 2) for 3D positions.

    Each axis owns a contiguous run of pairs; within a run, frequencies
    follow a geometric schedule base^(-i/m) with base 10000.
    """
    if d_head % 2 != 0:
        raise ValueError(f"RoPE requires an even head dimension, got {d_head}")
    n_pairs = d_head // 2
    chunks = []
    for axis, m in enumerate(axial_pair_counts(n_pairs)):
        if m == 0:
            continue
        i = torch.arange(m, dtype=positions.dtype, device=positions.device)
        freqs = ROPE_BASE ** (-i / m)
        chunks.append(positions[:, axis : axis + 1] * freqs)
    return torch.cat(chunks, dim=-1)


def rope_embed(positions: torch.Tensor, projected: torch.Tensor) -> torch.Tensor:
    """Rotate projected features pair-by-pair by position-proportional angles.

    ``projected`` has shape (..., n, d_head) with pairs interleaved as
    (even, odd) feature indices; rotation preserves each pair's norm.
    """
    d_head = projected.shape[-1]
    ang = rope_angles(positions, d_head)
    a = projected[..., 0::2]
    b = projected[..., 1::2]
    while ang.dim() < a.dim():  # broadcast over a possible head dimension
        ang = ang.unsqueeze(-2)
    cos, sin = torch.cos(ang), torch.sin(ang)
    return torch.stack(
        [a * cos - b * sin, a * sin + b * cos], dim=-1
    ).reshape(projected.shape)


def validate_anchor_indices(indices: torch.Tensor, n: int) -> torch.Tensor:
    """Check an anchor index set: nonempty, strictly increasing, within [0, n)."""
    indices = torch.as_tensor(indices, dtype=torch.long)
    if indices.numel() == 0:
        raise ValueError("anchor index set is empty")
    if indices.min() < 0 or indices.max() >= n:
        raise ValueError(f"anchor indices out of range for sequence of length {n}")
    if indices.numel() > 1 and (indices[1:] <= indices[:-1]).any():
        raise ValueError("anchor indices must be strictly increasing")
    return indices


class MultiHeadAttention(nn.Module):
    """Concat-heads attention with RoPE on queries and keys.

    d_head = d / n_heads; per head softmax(q k^T / sqrt(d_head)) v, heads
    concatenated and passed through an output projection.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        if (d // n_heads) % 2 != 0:
            raise ValueError(f"head dimension {d // n_heads} must be even for RoPE")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def forward(
        self,
        q_tokens: torch.Tensor,
        q_pos: torch.Tensor,
        kv_tokens: torch.Tensor,
        kv_pos: torch.Tensor,
        chunk_size: int | None = None,
    ) -> torch.Tensor:
        if kv_tokens.shape[0] == 0:
            raise ValueError("attention requires a nonempty key/value sequence")
        n_q = q_tokens.shape[0]
        n_kv = kv_tokens.shape[0]
        h, dh = self.n_heads, self.d_head

        k = rope_embed(kv_pos, self.wk(kv_tokens).view(n_kv, h, dh))
        v = self.wv(kv_tokens).view(n_kv, h, dh)

        if chunk_size is None or chunk_size >= n_q:
            chunk_size = n_q
        outs = []
        for start in range(0, n_q, chunk_size):
            sl = slice(start, min(start + chunk_size, n_q))
            q = rope_embed(q_pos[sl], self.wq(q_tokens[sl]).view(-1, h, dh))
            logits = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(dh)
            # same max-subtracted row softmax as softmax_rows, fused kernel
            attn = torch.softmax(logits, dim=-1)
            out = torch.einsum("hqk,khd->qhd", attn, v)
            outs.append(out.reshape(-1, self.d))
        return self.wo(torch.cat(outs, dim=0))


def attend(q_tokens, q_pos, kv_tokens, kv_pos, weights: MultiHeadAttention):
    """Cross attention of a query sequence over a key/value sequence."""
    return weights(q_tokens, q_pos, kv_tokens, kv_pos)


def anchor_attend(
    tokens: torch.Tensor,
    positions: torch.Tensor,
    anchor_idx: torch.Tensor,
    weights: MultiHeadAttention,
    chunk_size: int | None = None,
) -> torch.Tensor:
    """Anchor attention: all tokens query, only anchor tokens act as keys/values."""
    anchor_idx = validate_anchor_indices(anchor_idx, tokens.shape[0])
    return weights(
        tokens, positions, tokens[anchor_idx], positions[anchor_idx], chunk_size
    )


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + Attn(Norm(x)), then y + MLP(Norm(y)).

    One block serves all four usages (self, cross, anchor-self, anchor-cross);
    the key/value source is an optional second sequence, optionally restricted
    to an anchor subset. The attention pre-norm is shared between the query
    and key/value inputs so the anchor and cross cases degenerate exactly to
    self-attention when kv is the query sequence itself.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(
        self,
        x: torch.Tensor,
        x_pos: torch.Tensor,
        kv: torch.Tensor | None = None,
        kv_pos: torch.Tensor | None = None,
        anchor_idx: torch.Tensor | None = None,
        chunk_size: int | None = None,
    ) -> torch.Tensor:
        q_in = self.norm1(x)
        if kv is None:
            kv_in, kvp = q_in, x_pos
        else:
            kv_in, kvp = self.norm1(kv), kv_pos
        if anchor_idx is not None:
            anchor_idx = validate_anchor_indices(anchor_idx, kv_in.shape[0])
            kv_in, kvp = kv_in[anchor_idx], kvp[anchor_idx]
        x = x + self.attn(q_in, x_pos, kv_in, kvp, chunk_size)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))
