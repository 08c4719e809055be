"""Input branches: geometry encoder, context encoder, and volume encoder.

The geometry encoder pools terrain and obstacle clouds into supernode tokens,
self-attends each branch with shared weights, lets the branches exchange
information through a shared cross-attention block (obstacles attend to the
already-updated terrain), and concatenates terrain-first. The single-branch
variant pools one merged cloud and skips the cross step.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .attention import TransformerBlock, axial_pair_counts
from .nn import MlpBlock
from .supernodes import SupernodeEncoder, radius_neighbors, select_supernodes

COORD_RANGE = 1000.0  # normalized coordinates live in [0, 1000] per axis
WAVELENGTH_MIN = 1.0
WAVELENGTH_MAX = 1000.0


def sinusoidal_embed(coords: torch.Tensor, d: int) -> torch.Tensor:
    """Axial sin/cos embedding of (n, 3) coordinates into dimension d.

    Feature pairs are split across the 3 axes (extras to leading axes); per
    axis, frequencies form a geometric ladder spanning wavelengths 1 to 1000
    normalized units. Pairs are interleaved (sin, cos), so the origin maps to
    (0, 1, 0, 1, ...).
    """
    if d % 2 != 0:
        raise ValueError(f"sinusoidal embedding needs even d, got {d}")
    chunks = []
    for axis, m in enumerate(axial_pair_counts(d // 2)):
        if m == 0:
            continue
        wavelengths = torch.from_numpy(
            np.geomspace(WAVELENGTH_MIN, WAVELENGTH_MAX, m)
        ).to(coords.dtype)
        ang = coords[:, axis : axis + 1] * (2.0 * np.pi / wavelengths)
        pair = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
        chunks.append(pair.reshape(coords.shape[0], 2 * m))
    return torch.cat(chunks, dim=-1)


class ContextEncoder(nn.Module):
    """Flattened 256-entry meteorological profile -> one latent token."""

    def __init__(self, d: int):
        super().__init__()
        self.mlp = MlpBlock(256, d, d)

    def forward(self, profile_vec: torch.Tensor) -> torch.Tensor:
        return self.mlp(profile_vec)


class VolumeEncoder(nn.Module):
    """Sinusoidal coordinate embedding -> MLP -> additive context broadcast."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.mlp = MlpBlock(d, d, d)

    def forward(
        self, coords: torch.Tensor, context: torch.Tensor | None
    ) -> torch.Tensor:
        if coords.numel() and (
            coords.min() < -1e-6 or coords.max() > COORD_RANGE + 1e-6
        ):
            raise ValueError(
                "volume coordinates must be normalized to [0, 1000] per axis"
            )
        tokens = self.mlp(sinusoidal_embed(coords, self.d))
        if context is not None:
            tokens = tokens + context.unsqueeze(0)
        return tokens


class GeometryEncoder(nn.Module):
    """Branched (or merged) supernode encoding of terrain and obstacles.

    ``sn_main`` carries two scalar features (stability parameters); it encodes
    the terrain cloud in the split variant and the merged terrain+obstacle
    cloud, with the features broadcast to every point, in the single-branch
    variant.
    """

    def __init__(self, d: int, n_heads: int, split_branches: bool):
        super().__init__()
        self.split_branches = split_branches
        self.sn_main = SupernodeEncoder(d, 2)
        self.self_block = TransformerBlock(d, n_heads)
        if split_branches:
            self.sn_obstacle = SupernodeEncoder(d, 0)
            self.cross_block = TransformerBlock(d, n_heads)

    def _pool(
        self,
        encoder: SupernodeEncoder,
        coords: torch.Tensor,
        feats: torch.Tensor | None,
        n_sn: int,
        radius: float,
        max_degree: int,
        rng: np.random.Generator,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        coords_np = coords.detach().cpu().numpy().astype(np.float64)
        idx = select_supernodes(coords.shape[0], n_sn, rng)
        neighbors = radius_neighbors(
            coords_np, coords_np[idx], radius, max_degree, center_indices=idx
        )
        tokens = encoder(coords, feats, idx, neighbors)
        return tokens, coords[torch.from_numpy(idx)]

    def forward(
        self,
        terrain_coords: torch.Tensor,
        terrain_feats: torch.Tensor,
        obstacle_coords: torch.Tensor,
        n_gnd_sn: int,
        n_obs_sn: int,
        r_gnd: float,
        r_obs: float,
        max_degree: int,
        rng: np.random.Generator,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.split_branches:
            coords = torch.cat([terrain_coords, obstacle_coords], dim=0)
            feats = terrain_feats[0].unsqueeze(0).expand(coords.shape[0], -1)
            tokens, pos = self._pool(
                self.sn_main, coords, feats, n_gnd_sn + n_obs_sn, r_gnd,
                max_degree, rng,
            )
            return self.self_block(tokens, pos), pos

        u_gnd, p_gnd = self._pool(
            self.sn_main, terrain_coords, terrain_feats, n_gnd_sn, r_gnd,
            max_degree, rng,
        )
        u_obs, p_obs = self._pool(
            self.sn_obstacle, obstacle_coords, None, n_obs_sn, r_obs,
            max_degree, rng,
        )
        u_gnd = self.self_block(u_gnd, p_gnd)
        u_obs = self.self_block(u_obs, p_obs)
        u_gnd = self.cross_block(u_gnd, p_gnd, kv=u_obs, kv_pos=p_obs)
        u_obs = self.cross_block(u_obs, p_obs, kv=u_gnd, kv_pos=p_gnd)
        return torch.cat([u_gnd, u_obs], dim=0), torch.cat([p_gnd, p_obs], dim=0)
