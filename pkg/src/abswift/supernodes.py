"""Supernode pooling: compress a point cloud into a fixed token sequence.

A random subset of points becomes supernodes; each one aggregates messages
from all cloud points within a radius (nearest-first truncation at
``max_degree``). The message path sees relative positions only, so it is
translation invariant; the supernode's absolute position enters through a
separate embedding concatenated before the output projection.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .nn import gelu

MAX_DEGREE_DEFAULT = 32


def select_supernodes(n: int, n_sn: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``n_sn`` distinct indices from [0, n), sorted."""
    if n_sn > n:
        raise ValueError(f"cannot select {n_sn} supernodes from {n} points")
    idx = rng.choice(n, size=n_sn, replace=False)
    return np.sort(idx)


def radius_neighbors(
    points: np.ndarray,
    centers: np.ndarray,
    radius: float,
    max_degree: int = MAX_DEGREE_DEFAULT,
    center_indices: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Exact radius search accelerated by a uniform grid of cell size radius.

    Returns, per center, indices of points with Euclidean distance <= radius,
    truncated to the ``max_degree`` nearest with ties broken by lower index.
    When ``center_indices`` identifies each center as a cloud point, that
    point is always ranked first among its zero-distance ties.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")

    cells: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(points / radius).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)

    r2 = radius * radius
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ]
    result = []
    for ci, c in enumerate(centers):
        kx, ky, kz = np.floor(c / radius).astype(np.int64)
        cand: list[int] = []
        for dx, dy, dz in offsets:
            cand.extend(cells.get((kx + dx, ky + dy, kz + dz), ()))
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size == 0:
            result.append(cand)
            continue
        d2 = np.sum((points[cand] - c) ** 2, axis=1)
        keep = d2 <= r2
        cand, d2 = cand[keep], d2[keep]
        if center_indices is not None:
            not_self = (cand != center_indices[ci]).astype(np.int64)
            order = np.lexsort((cand, not_self, d2))
        else:
            order = np.lexsort((cand, d2))
        result.append(cand[order][:max_degree])
    return result


class SupernodeEncoder(nn.Module):
    """Radius-limited message passing onto randomly selected supernodes.

    Per supernode s and neighbor j:
        m_j  = MLP(gelu(W_rel [c_j - c_s, |c_j - c_s|]) ++ feat_j)
        token = W_proj (mean_j m_j ++ gelu(W_pos c_s) ++ feat_s)
    with the message MLP a Linear(d + f, d) -> GeLU -> Linear(d, d) stack.
    """

    def __init__(self, d: int, n_features: int):
        super().__init__()
        self.d = d
        self.n_features = n_features
        self.rel_embed = nn.Linear(4, d)
        self.msg_fc1 = nn.Linear(d + n_features, d)
        self.msg_fc2 = nn.Linear(d, d)
        self.pos_embed = nn.Linear(3, d)
        self.proj = nn.Linear(2 * d + n_features, d)

    def forward(
        self,
        coords: torch.Tensor,
        feats: torch.Tensor | None,
        supernode_idx: np.ndarray,
        neighbor_lists: list[np.ndarray],
    ) -> torch.Tensor:
        n_sn = len(supernode_idx)
        if n_sn != len(neighbor_lists):
            raise ValueError("one neighbor list per supernode expected")
        counts = np.array([len(nb) for nb in neighbor_lists], dtype=np.int64)
        if (counts == 0).any():
            raise ValueError("supernode with empty neighborhood")
        src = torch.from_numpy(np.concatenate(neighbor_lists))
        dst = torch.from_numpy(np.repeat(np.arange(n_sn), counts))
        sn_idx = torch.from_numpy(np.asarray(supernode_idx, dtype=np.int64))

        rel = coords[src] - coords[sn_idx][dst]
        mag = rel.norm(dim=1, keepdim=True)
        x = gelu(self.rel_embed(torch.cat([rel, mag], dim=1)))
        if self.n_features:
            x = torch.cat([x, feats[src]], dim=1)
        msgs = self.msg_fc2(gelu(self.msg_fc1(x)))

        mean = torch.zeros(n_sn, self.d, dtype=msgs.dtype)
        mean.index_add_(0, dst, msgs)
        mean = mean / torch.from_numpy(counts).to(mean.dtype).unsqueeze(1)

        sn_embed = gelu(self.pos_embed(coords[sn_idx]))
        parts = [mean, sn_embed]
        if self.n_features:
            parts.append(feats[sn_idx])
        return self.proj(torch.cat(parts, dim=1))
