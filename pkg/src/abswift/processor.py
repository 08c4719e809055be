"""Processor physics blocks and the anchored per-field decoder."""

from __future__ import annotations

import torch
from torch import nn

from .attention import TransformerBlock
from .nn import MlpBlock

FIELD_HEAD_DIMS = {
    "vel": 3,
    "p": 1,
    "theta": 1,
    "log_k": 1,
    "log_eps": 1,
}
N_OUTPUT_FIELDS = 7


class PhysicsBlock(nn.Module):
    """One processor stage shared between the geometry and volume branches.

    The same self-attention block serves both branches (the geometry branch
    uses its full sequence as anchors), and the same cross-attention block
    serves both cross directions: geometry attends to the volume anchors,
    then the volume sequence attends to the updated geometry sequence.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.self_block = TransformerBlock(d, n_heads)
        self.cross_block = TransformerBlock(d, n_heads)

    def forward(self, geom, g_pos, vol, v_pos, anchor_idx, chunk_size=None):
        geom = self.self_block(geom, g_pos)
        vol = self.self_block(
            vol, v_pos, anchor_idx=anchor_idx, chunk_size=chunk_size
        )
        geom = self.cross_block(
            geom, g_pos, kv=vol, kv_pos=v_pos, anchor_idx=anchor_idx
        )
        vol = self.cross_block(
            vol, v_pos, kv=geom, kv_pos=g_pos, chunk_size=chunk_size
        )
        return geom, vol


class Decoder(nn.Module):
    """Anchored self-attention stack plus per-field output heads.

    With ``mlp_heads`` the five fields get independent MLPs (hidden 4d); the
    single-head variant decodes all 7 outputs with one linear layer.
    """

    def __init__(self, d: int, n_heads: int, n_blocks: int, mlp_heads: bool):
        super().__init__()
        self.mlp_heads = mlp_heads
        self.blocks = nn.ModuleList(
            TransformerBlock(d, n_heads) for _ in range(n_blocks)
        )
        self.final_norm = nn.LayerNorm(d)
        if mlp_heads:
            self.heads = nn.ModuleDict(
                {name: MlpBlock(d, 4 * d, out) for name, out in FIELD_HEAD_DIMS.items()}
            )
        else:
            self.head_linear = nn.Linear(d, N_OUTPUT_FIELDS)

    def forward(self, vol, v_pos, anchor_idx, chunk_size=None) -> torch.Tensor:
        for block in self.blocks:
            vol = block(vol, v_pos, anchor_idx=anchor_idx, chunk_size=chunk_size)
        vol = self.final_norm(vol)
        if not self.mlp_heads:
            return self.head_linear(vol)
        return torch.cat(
            [self.heads[name](vol) for name in FIELD_HEAD_DIMS], dim=-1
        )
