import numpy as np
import pytest
import torch

from abswift.nn import gelu
from abswift.supernodes import SupernodeEncoder, radius_neighbors, select_supernodes


def brute_force_neighbors(points, centers, radius, max_degree, center_indices=None):
    """O(n^2) scan with nearest-first truncation and lowest-index tie-break."""
    out = []
    for ci, c in enumerate(centers):
        hits = []
        for j, p in enumerate(points):
            d2 = float(np.sum((p - c) ** 2))
            if d2 <= radius * radius:
                is_self = center_indices is not None and j == center_indices[ci]
                hits.append((d2, 0 if is_self else 1, j))
        hits.sort()
        out.append(np.array([j for _, _, j in hits[:max_degree]], dtype=np.int64))
    return out


class TestSelectSupernodes:
    def test_all_points(self):
        idx = select_supernodes(5, 5, np.random.default_rng(0))
        assert idx.tolist() == [0, 1, 2, 3, 4]

    def test_oversized_rejected(self):
        with pytest.raises(ValueError, match="cannot select"):
            select_supernodes(4, 5, np.random.default_rng(0))

    def test_deterministic(self):
        a = select_supernodes(100, 10, np.random.default_rng(3))
        b = select_supernodes(100, 10, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_uniform_frequency(self):
        counts = np.zeros(10)
        for seed in range(10_000):
            idx = select_supernodes(10, 1, np.random.default_rng(seed))
            counts[idx[0]] += 1
        freqs = counts / 10_000
        assert np.all(np.abs(freqs - 0.1) < 0.02)

    def test_sorted_and_distinct(self):
        idx = select_supernodes(50, 20, np.random.default_rng(1))
        assert np.all(np.diff(idx) > 0)


class TestRadiusNeighbors:
    def test_single_point_self(self):
        pts = np.array([[0.5, 0.5, 0.5]])
        nbrs = radius_neighbors(pts, pts, 10.0, center_indices=np.array([0]))
        assert nbrs[0].tolist() == [0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(size=(20, 3))
        centers = pts[:5]
        got = radius_neighbors(pts, centers, 0.3, max_degree=32,
                               center_indices=np.arange(5))
        expected = brute_force_neighbors(pts, centers, 0.3, 32,
                                         center_indices=np.arange(5))
        for g, e in zip(got, expected):
            np.testing.assert_array_equal(g, e)

    def test_matches_brute_force_small_degree(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(size=(50, 3)) * 2
        centers = rng.uniform(size=(7, 3)) * 2
        got = radius_neighbors(pts, centers, 0.6, max_degree=4)
        expected = brute_force_neighbors(pts, centers, 0.6, 4)
        for g, e in zip(got, expected):
            np.testing.assert_array_equal(g, e)

    def test_tie_break_lowest_index(self):
        # one strictly nearest point plus four equidistant ties
        pts = np.array(
            [
                [0.1, 0.0, 0.0],
                [0.2, 0.0, 0.0],
                [0.0, 0.2, 0.0],
                [0.0, 0.0, 0.2],
                [-0.2, 0.0, 0.0],
            ]
        )
        centers = np.zeros((1, 3))
        nbrs = radius_neighbors(pts, centers, 1.0, max_degree=2)
        assert nbrs[0].tolist() == [0, 1]

    def test_self_inclusion_under_truncation(self):
        # center point crowded out by nearer neighbors unless ranked first
        pts = np.vstack([np.zeros(3), np.full((40, 3), 1e-9)])
        nbrs = radius_neighbors(
            pts, pts[:1], 1.0, max_degree=2, center_indices=np.array([0])
        )
        assert 0 in nbrs[0]

    def test_invalid_radius(self):
        with pytest.raises(ValueError, match="positive"):
            radius_neighbors(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


def encoder_oracle(enc: SupernodeEncoder, coords, feats, sn_idx, neighbor_lists):
    """Literal per-neighbor loop over the documented message formula."""
    tokens = []
    for s, nbrs in zip(sn_idx, neighbor_lists):
        msgs = []
        for j in nbrs:
            rel = coords[j] - coords[s]
            x = torch.cat([rel, rel.norm().reshape(1)])
            x = gelu(enc.rel_embed(x))
            if enc.n_features:
                x = torch.cat([x, feats[j]])
            msgs.append(enc.msg_fc2(gelu(enc.msg_fc1(x))))
        mean = torch.stack(msgs).mean(dim=0)
        parts = [mean, gelu(enc.pos_embed(coords[s]))]
        if enc.n_features:
            parts.append(feats[s])
        tokens.append(enc.proj(torch.cat(parts)))
    return torch.stack(tokens)


class TestSupernodeEncoder:
    def test_matches_loop_oracle(self):
        torch.manual_seed(0)
        enc = SupernodeEncoder(8, 2).double()
        coords = torch.rand(6, 3, dtype=torch.float64) * 10
        feats = torch.randn(6, 2, dtype=torch.float64)
        sn_idx = np.array([1, 4])
        nbrs = radius_neighbors(
            coords.numpy(), coords.numpy()[sn_idx], 6.0, center_indices=sn_idx
        )
        got = enc(coords, feats, sn_idx, nbrs)
        expected = encoder_oracle(enc, coords, feats, sn_idx, nbrs)
        assert torch.allclose(got, expected, atol=1e-12)

    def test_self_only_neighborhood(self):
        torch.manual_seed(1)
        enc = SupernodeEncoder(8, 0).double()
        coords = torch.tensor([[3.0, 4.0, 5.0]], dtype=torch.float64)
        got = enc(coords, None, np.array([0]), [np.array([0])])
        rel = torch.zeros(4, dtype=torch.float64)
        msg = enc.msg_fc2(gelu(enc.msg_fc1(gelu(enc.rel_embed(rel)))))
        expected = enc.proj(torch.cat([msg, gelu(enc.pos_embed(coords[0]))]))
        assert torch.allclose(got[0], expected, atol=1e-12)

    def test_output_shape(self):
        torch.manual_seed(2)
        enc = SupernodeEncoder(16, 2)
        coords = torch.rand(30, 3) * 5
        feats = torch.randn(30, 2)
        idx = select_supernodes(30, 10, np.random.default_rng(0))
        nbrs = radius_neighbors(coords.numpy(), coords.numpy()[idx], 3.0,
                                center_indices=idx)
        assert enc(coords, feats, idx, nbrs).shape == (10, 16)

    def test_translation_invariance_of_messages(self):
        torch.manual_seed(3)
        enc = SupernodeEncoder(8, 0).double()
        with torch.no_grad():  # silence the absolute-position path
            enc.pos_embed.weight.zero_()
            enc.pos_embed.bias.zero_()
        coords = torch.rand(10, 3, dtype=torch.float64)
        idx = np.array([2, 7])
        nbrs = radius_neighbors(coords.numpy(), coords.numpy()[idx], 2.0,
                                center_indices=idx)
        out1 = enc(coords, None, idx, nbrs)
        out2 = enc(coords + torch.tensor([5.0, -3.0, 2.0]), None, idx, nbrs)
        # offsets cancel in the relative positions up to float rounding
        assert torch.allclose(out1, out2, atol=1e-12)

    def test_neighbor_permutation_invariance(self):
        torch.manual_seed(4)
        enc = SupernodeEncoder(8, 2).double()
        rng = np.random.default_rng(4)
        coords = torch.rand(12, 3, dtype=torch.float64)
        feats = torch.randn(12, 2, dtype=torch.float64)
        perm = rng.permutation(12)
        inv = np.argsort(perm)
        idx = np.array([0, 5])
        nbrs = radius_neighbors(coords.numpy(), coords.numpy()[idx], 3.0,
                                center_indices=idx)
        out1 = enc(coords, feats, idx, nbrs)
        nbrs_p = [np.sort(inv[nb]) for nb in nbrs]
        out2 = enc(coords[perm], feats[perm], inv[idx], nbrs_p)
        assert torch.allclose(out1, out2, atol=1e-6)

    def test_out_of_radius_points_have_no_influence(self):
        torch.manual_seed(5)
        enc = SupernodeEncoder(8, 0).double()
        coords = torch.rand(10, 3, dtype=torch.float64)
        far = coords.clone()
        far[9] += 100.0  # push one point out of every neighborhood
        idx = np.array([0, 3])
        nbrs = radius_neighbors(far.numpy(), far.numpy()[idx], 2.0,
                                center_indices=idx)
        out1 = enc(far, None, idx, nbrs)
        far2 = far.clone()
        far2[9] += 55.5  # perturb the isolated point
        nbrs2 = radius_neighbors(far2.numpy(), far2.numpy()[idx], 2.0,
                                 center_indices=idx)
        out2 = enc(far2, None, idx, nbrs2)
        assert torch.equal(out1, out2)

    def test_empty_neighborhood_rejected(self):
        enc = SupernodeEncoder(8, 0)
        with pytest.raises(ValueError, match="empty"):
            enc(torch.rand(3, 3), None, np.array([0]), [np.array([], dtype=np.int64)])
