import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cft import numerics as nx
from cft.encodings import BevConfig
from cft.va import (REC2X2_GROUPS, AttentionStack, CrossAttentionBlock, SchemeKind, SelfAttentionBlock,
                    ViewAwareTransformer, attention_maps, block_diagonal_mask, build_scheme,
                    masked_global_cross_attention, multihead_attention, polar_sectors, windowed_attention,
                    windowed_cross_attention)
from cft.views import VIEW, VIEW_AZIMUTHS, clockwise_neighbor
from helpers import maxdiff

pytestmark = pytest.mark.usefixtures("float64")

DESK = BevConfig()


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_scheme_partitions_every_cell_once(kind):
    s = build_scheme(kind, DESK)
    ids = s.index[s.valid]
    assert sorted(ids.tolist()) == list(range(256))
    assert sum(s.window_sizes()) == 256
    assert s.pad_to == max(s.window_sizes())
    assert np.all(s.index[~s.valid] == 256)
    for w in range(s.n_windows):
        assert np.all(s.assignment.reshape(-1)[s.index[w][s.valid[w]]] == w)


def test_rec2x2_quadrants_follow_ego_axes():
    s = build_scheme(SchemeKind.REC2X2, DESK)
    cell = lambda x, y: s.assignment[DESK.cell_of(x, y)]
    names = [tuple(VIEW[v] for v in g) for g in REC2X2_GROUPS]
    assert s.groups == [list(g) for g in names]
    assert cell(10.0, 10.0) == 0      # front-left
    assert cell(10.0, -10.0) == 1     # front-right
    assert cell(-10.0, 10.0) == 2     # back-left
    assert cell(-10.0, -10.0) == 3    # back-right
    assert VIEW["F"] in s.groups[0] and VIEW["B"] in s.groups[3]


def test_rec2x3_routes_rows_to_front_or_back_views():
    s = build_scheme(SchemeKind.REC2X3, DESK)
    assert s.n_windows == 6
    front = {VIEW[v] for v in ("FL", "F", "FR")}
    assert set(s.groups[s.assignment[DESK.cell_of(20.0, 0.0)]]) == front
    assert set(s.groups[s.assignment[DESK.cell_of(-20.0, 0.0)]]) == {VIEW[v] for v in ("BL", "B", "BR")}
    assert s.pad_to == (16 // 2) * math.ceil(16 / 3)


@pytest.mark.parametrize("H", [16, 32, 64])
def test_largest_polar_sector_matches_ceiling_area(H):
    cfg = BevConfig(H_b=H, W_b=H)
    S = 0.5 * (H / 2) * (H - H / (2 * math.sqrt(3)))
    counts = np.bincount(polar_sectors(cfg).reshape(-1), minlength=6)
    assert counts.sum() == H * H
    assert counts.max() == math.ceil(S)


def test_polar_sectors_pick_nearest_camera():
    sectors = polar_sectors(DESK)
    for name, az in zip(("FL", "F", "FR", "BL", "B", "BR"), VIEW_AZIMUTHS):
        x, y = 20 * math.cos(math.radians(az)), 20 * math.sin(math.radians(az))
        assert sectors[DESK.cell_of(x, y)] == VIEW[name]


def test_polar_b_adds_clockwise_neighbour():
    s = build_scheme(SchemeKind.POLAR_B, DESK)
    assert s.groups[VIEW["F"]] == [VIEW["F"], VIEW["FR"]]
    assert s.groups[VIEW["FR"]] == [VIEW["FR"], VIEW["BR"]]
    assert clockwise_neighbor(VIEW["B"]) == VIEW["BL"]


def test_scheme_errors():
    with pytest.raises(ValueError):
        build_scheme(SchemeKind.REC2X2, BevConfig(H_b=15))
    with pytest.raises(ValueError):
        build_scheme(SchemeKind.POLAR_A, DESK, N_v=4)
    with pytest.raises(ValueError):
        build_scheme("hexagonal", DESK)
    assert build_scheme(SchemeKind.GLOBAL, DESK, N_v=4).groups == [[0, 1, 2, 3]]


def qkv(gen, B=2, N_v=6, L=12, d=8, cells=256):
    q = torch.randn(B, cells, d, generator=gen)
    k = torch.randn(B, N_v, L, d, generator=gen)
    v = torch.randn(B, N_v, L, d, generator=gen)
    return q, k, v


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_windowed_equals_masked_global(kind, gen):
    s = build_scheme(kind, DESK)
    q, k, v = qkv(gen)
    a, _ = windowed_cross_attention(q, k, v, s, heads=2)
    b, _ = masked_global_cross_attention(q, k, v, s, heads=2)
    assert a.shape == b.shape == (2, 256, 8)
    assert maxdiff(a, b) < 1e-12


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_block_modes_agree(kind, gen):
    s = build_scheme(kind, DESK)
    block = CrossAttentionBlock(16, 8, 6, heads=2, head_dim=4, generator=gen)
    bev_c, bev_p = torch.randn(2, 256, 16, generator=gen), torch.randn(1, 256, 8, generator=gen)
    img_c, img_p = torch.randn(2, 6, 10, 16, generator=gen), torch.randn(1, 6, 10, 6, generator=gen)
    a = block(bev_c, bev_p, img_c, img_p, s, mode="windowed")
    b = block(bev_c, bev_p, img_c, img_p, s, mode="masked_global")
    assert maxdiff(a, b) < 1e-12
    with pytest.raises(ValueError):
        block(bev_c, bev_p, img_c, img_p, s, mode="sparse")


@pytest.mark.parametrize("kind", [SchemeKind.REC2X3, SchemeKind.POLAR_A, SchemeKind.POLAR_B])
def test_padded_rows_get_exactly_zero_gradient(kind, gen):
    s = build_scheme(kind, DESK)
    assert (~s.valid).any()
    _, k, v = qkv(gen)
    valid = torch.from_numpy(s.valid)
    q_pad = torch.randn(2, s.n_windows, s.pad_to, 8, generator=gen, requires_grad=True)
    groups = torch.tensor(s.groups)
    k_g, v_g = k[:, groups].flatten(2, 3), v[:, groups].flatten(2, 3)
    out, _ = windowed_attention(q_pad, k_g, v_g, 2, valid)
    w = torch.randn(out[:, valid].shape, generator=gen)
    nx.backward((out[:, valid] * w).sum())
    assert torch.all(q_pad.grad[:, ~valid] == 0)
    assert q_pad.grad[:, valid].abs().sum() > 0


def test_windowed_cross_attention_checks_cell_count(gen):
    s = build_scheme(SchemeKind.REC2X2, DESK)
    q, k, v = qkv(gen, cells=255)
    with pytest.raises(ValueError):
        windowed_cross_attention(q, k, v, s, heads=2)


def test_per_view_self_attention_equals_block_masked(gen):
    block = SelfAttentionBlock(16, 6, heads=2, head_dim=4, generator=gen)
    x, p = torch.randn(2, 6, 9, 16, generator=gen), torch.randn(1, 6, 9, 6, generator=gen)
    a = block(x, p, mode="per_view")
    b = block(x, p, mode="masked_global")
    assert maxdiff(a, b) < 1e-12
    with pytest.raises(ValueError):
        block(x, p, mode="global")


def test_self_attention_mul_adds(gen):
    N_v, L, heads, hd = 6, 20, 4, 8
    block = SelfAttentionBlock(32, 0, heads, hd, gen)
    with nx.counting() as c:
        block(torch.randn(1, N_v, L, 32), torch.zeros(1, N_v, L, 0))
    d = heads * hd
    assert c.total("self.score") == N_v * L * L * d
    assert c.total("self.value") == N_v * L * L * d


def test_multihead_attention_matches_reference(gen):
    q, k, v = (torch.randn(5, 8, generator=gen) for _ in range(3))
    out, attn = multihead_attention(q, k, v, heads=2)
    ref = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        w = torch.softmax(q[:, sl] @ k[:, sl].T / 2.0, dim=-1)
        ref.append(w @ v[:, sl])
    assert torch.allclose(out, torch.cat(ref, -1), atol=1e-14)
    assert attn.shape == (2, 5, 5)
    with pytest.raises(ValueError):
        multihead_attention(q, k[:, :4], v, heads=2)
    with pytest.raises(ValueError):
        multihead_attention(q, k, v, heads=3)


def test_block_diagonal_mask():
    m = block_diagonal_mask(3, 2)
    assert m.shape == (6, 6)
    assert m.sum() == 12 and m[0, 1] and not m[1, 2]


def test_attention_maps_sum_to_one(gen):
    s = build_scheme(SchemeKind.POLAR_B, DESK)
    q, k, v = qkv(gen, B=1, L=12)
    _, attn = windowed_cross_attention(q, k, v, s, heads=2)
    maps = attention_maps(attn[0], s, 3, 4)
    assert len(maps) == 256
    for cell, per_view in maps.items():
        assert set(per_view) == set(s.groups[s.assignment[cell]])
        assert sum(m.sum() for m in per_view.values()) == pytest.approx(1.0)


def test_transformer_shapes_and_modes(gen):
    stack = AttentionStack(n_self=1, n_cross=2, heads=2, head_dim=4)
    t = ViewAwareTransformer(16, 8, 6, stack, gen)
    s = build_scheme(SchemeKind.REC2X2, DESK)
    args = (torch.randn(2, 256, 16), torch.randn(1, 256, 8), torch.randn(2, 6, 10, 16), torch.randn(1, 6, 10, 6))
    a = t(*args, s)
    b = t(*args, s, mode="masked_global")
    assert a.shape == (2, 256, 16)
    assert maxdiff(a, b) < 1e-12
    with pytest.raises(ValueError):
        AttentionStack(n_cross=0)
