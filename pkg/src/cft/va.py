"""View-aware attention.

Image tokens attend only within their own view. BEV tokens are split into
windows and each window attends only to the pixels of a fixed group of
views. Windows of unequal size are zero-padded to a common length so all
windows run as one batched attention; padded query rows are discarded.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import numerics as nx
from .encodings import BevConfig
from .pa import FFN
from .views import N_VIEWS, VIEW, VIEW_AZIMUTHS, clockwise_neighbor


class SchemeKind(str, enum.Enum):
    GLOBAL = "global"
    REC2X2 = "rec2x2"
    REC2X3 = "rec2x3"
    POLAR_A = "polar_a"
    POLAR_B = "polar_b"


# Eq. 4 view groups, windows ordered FL, FR, BL, BR
REC2X2_GROUPS = (
    ("FL", "F", "BL"),
    ("F", "FR", "BR"),
    ("FL", "BL", "B"),
    ("FR", "B", "BR"),
)


@dataclass
class WindowScheme:
    kind: SchemeKind
    assignment: np.ndarray        # (H_b, W_b) window id per cell
    groups: list[list[int]]       # view indices per window
    index: np.ndarray             # (n_windows, pad_to) flat cell ids; H_b*W_b marks padding
    valid: np.ndarray             # (n_windows, pad_to) bool

    @property
    def n_windows(self) -> int:
        return len(self.groups)

    @property
    def pad_to(self) -> int:
        return self.index.shape[1]

    @property
    def n_cells(self) -> int:
        return self.assignment.size

    @property
    def group_size(self) -> int:
        return len(self.groups[0])

    def window_sizes(self) -> list[int]:
        return self.valid.sum(axis=1).tolist()

    def key_mask(self, n_pixels: int) -> torch.Tensor:
        """(n_cells, N_v * n_pixels) bool: which image tokens each BEV cell may attend to."""
        n_views = max(max(g) for g in self.groups) + 1
        allowed = np.zeros((self.n_windows, n_views), dtype=bool)
        for w, group in enumerate(self.groups):
            allowed[w, group] = True
        per_cell = allowed[self.assignment.reshape(-1)]
        return torch.from_numpy(np.repeat(per_cell, n_pixels, axis=1))


def build_scheme(kind: SchemeKind | str, cfg: BevConfig, N_v: int = N_VIEWS) -> WindowScheme:
    kind = SchemeKind(kind)
    H, W = cfg.H_b, cfg.W_b
    if kind is SchemeKind.GLOBAL:
        assignment = np.zeros((H, W), dtype=np.int64)
        groups = [list(range(N_v))]
    else:
        if N_v != N_VIEWS:
            raise ValueError(f"{kind.value} routing is defined for {N_VIEWS} surround views, got {N_v}")
        if kind is SchemeKind.REC2X2:
            if H % 2 or W % 2:
                raise ValueError("rec2x2 needs even grid extents")
            front = np.arange(H)[:, None] >= H // 2
            left = np.arange(W)[None, :] >= W // 2
            # FL=0, FR=1, BL=2, BR=3
            assignment = np.where(front, 0, 2) + np.where(left, 0, 1)
            groups = [[VIEW[v] for v in g] for g in REC2X2_GROUPS]
        elif kind is SchemeKind.REC2X3:
            if H % 2 or W < 3:
                raise ValueError("rec2x3 needs an even number of rows and at least 3 columns")
            col_block = np.concatenate([np.full(len(c), i) for i, c in enumerate(np.array_split(np.arange(W), 3))])
            front = (np.arange(H) >= H // 2)[:, None]
            assignment = np.where(front, 0, 3) + col_block[None, :]
            front_group = [VIEW["FL"], VIEW["F"], VIEW["FR"]]
            back_group = [VIEW["BL"], VIEW["B"], VIEW["BR"]]
            groups = [front_group] * 3 + [back_group] * 3
        else:
            assignment = polar_sectors(cfg)
            if kind is SchemeKind.POLAR_A:
                groups = [[v] for v in range(N_v)]
            else:
                groups = [[v, clockwise_neighbor(v)] for v in range(N_v)]
    assignment = np.asarray(assignment, dtype=np.int64)
    n_win = len(groups)
    members = [np.flatnonzero(assignment.reshape(-1) == w) for w in range(n_win)]
    if any(len(m) == 0 for m in members):
        raise ValueError(f"{kind.value}: grid {H}x{W} leaves a window empty")
    pad_to = max(len(m) for m in members)
    index = np.full((n_win, pad_to), H * W, dtype=np.int64)
    valid = np.zeros((n_win, pad_to), dtype=bool)
    for w, m in enumerate(members):
        index[w, : len(m)] = m
        valid[w, : len(m)] = True
    return WindowScheme(kind, assignment, [list(g) for g in groups], index, valid)


def polar_sectors(cfg: BevConfig) -> np.ndarray:
    """Sector (= view index) per cell: the camera azimuth nearest the cell's bearing."""
    centers = cfg.grid_centers().numpy()
    bearing = np.degrees(np.arctan2(centers[..., 1], centers[..., 0]))
    diff = (bearing[..., None] - np.asarray(VIEW_AZIMUTHS) + 180.0) % 360.0 - 180.0
    return np.abs(diff).argmin(axis=-1)


# ---------------------------------------------------------------------------
# attention kernels


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, hd = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * hd)


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                        key_mask: torch.Tensor | None = None, q_valid: torch.Tensor | None = None,
                        label: str = "attn") -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention.

    q (..., Nq, d), k (..., Nk, d), v (..., Nk, dv). ``key_mask`` (broadcastable
    to (..., Nq, Nk), True = attend) sends masked scores to -inf before the
    softmax. ``q_valid`` (broadcastable to q.shape[:-1]) only affects the
    padding-excluded mul-add bookkeeping. Returns output and weights
    (..., heads, Nq, Nk).
    """
    if k.shape[-1] != q.shape[-1]:
        raise ValueError("query and key widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key and value counts differ")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    qh = qh * (1.0 / math.sqrt(q.shape[-1] // heads))
    n_rows = math.prod(q.shape[:-1])
    valid_rows = n_rows if q_valid is None else int(q_valid.expand(q.shape[:-1]).sum())
    nk = k.shape[-2]
    score_valid = valid_rows * nk * q.shape[-1]
    value_valid = valid_rows * nk * v.shape[-1]
    scores = nx.matmul(qh, kh.transpose(-1, -2), label=f"{label}.score", valid=score_valid)
    mask = None
    if key_mask is not None:
        mask = key_mask.reshape((1,) * max(0, 2 - key_mask.dim()) + tuple(key_mask.shape)).unsqueeze(-3)
    attn = nx.softmax(scores, axis=-1, mask=mask)
    out = nx.matmul(attn, vh, label=f"{label}.value", valid=value_valid)
    return _merge_heads(out), attn


def fused_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                    q_valid: torch.Tensor | None = None, label: str = "attn") -> torch.Tensor:
    """Unmasked multi-head attention through the fused kernel; no weights are returned.

    Same result as ``multihead_attention`` and the same mul-add bookkeeping.
    """
    if k.shape[-1] != q.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("query/key widths or key/value counts differ")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    rows, nk = math.prod(q.shape[:-1]), k.shape[-2]
    valid_rows = rows if q_valid is None else int(q_valid.expand(q.shape[:-1]).sum())
    nx.record(f"{label}.score", rows * nk * q.shape[-1], valid_rows * nk * q.shape[-1])
    nx.record(f"{label}.value", rows * nk * v.shape[-1], valid_rows * nk * v.shape[-1])
    # the fused CPU kernel only accepts (batch, heads, n, d)
    out = F.scaled_dot_product_attention(*(t.reshape(-1, *t.shape[-3:]) for t in (qh, kh, vh)))
    return nx.check_finite(_merge_heads(out.reshape(*qh.shape[:-1], vh.shape[-1])), label)


def windowed_attention(q_pad: torch.Tensor, k_grp: torch.Tensor, v_grp: torch.Tensor, heads: int,
                       valid: torch.Tensor, label: str = "cross",
                       need_weights: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Attention over already-gathered windows: q_pad (B, n_win, pad_to, d), keys (B, n_win, Nk, d).

    Windows never mask keys, so without ``need_weights`` the fused kernel is used.
    """
    if not need_weights:
        return fused_attention(q_pad, k_grp, v_grp, heads, q_valid=valid, label=label), None
    return multihead_attention(q_pad, k_grp, v_grp, heads, q_valid=valid, label=label)


def windowed_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scheme: WindowScheme,
                             heads: int, label: str = "cross",
                             need_weights: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
    """q (B, N_cells, d); k, v (B, N_v, L, d). Output (B, N_cells, dv) in cell order."""
    B, n_cells, d = q.shape
    if n_cells != scheme.n_cells:
        raise ValueError(f"scheme covers {scheme.n_cells} cells, queries have {n_cells}")
    index = torch.from_numpy(scheme.index)
    valid = torch.from_numpy(scheme.valid)
    q_pad = nx.concat([q, q.new_zeros(B, 1, d)], axis=1)[:, index]
    groups = torch.tensor(scheme.groups)
    k_grp = k[:, groups].flatten(2, 3)
    v_grp = v[:, groups].flatten(2, 3)
    out, attn = windowed_attention(q_pad, k_grp, v_grp, heads, valid, label=label, need_weights=need_weights)
    flat_ids = index[valid]
    out = out[:, valid][:, torch.argsort(flat_ids)]
    return out, attn


def masked_global_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scheme: WindowScheme,
                                  heads: int, label: str = "cross") -> tuple[torch.Tensor, torch.Tensor]:
    """Reference: every cell against every pixel, with the scheme expressed as a key mask."""
    L = k.shape[2]
    mask = scheme.key_mask(L)
    return multihead_attention(q, k.flatten(1, 2), v.flatten(1, 2), heads, key_mask=mask, label=label)


def block_diagonal_mask(n_views: int, n_pixels: int) -> torch.Tensor:
    view = torch.arange(n_views).repeat_interleave(n_pixels)
    return view[:, None] == view[None, :]


# ---------------------------------------------------------------------------
# transformer blocks


class _Norm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return nx.layer_norm(x, self.gain, self.bias)


class _Proj(nn.Module):
    def __init__(self, d_in: int, d_out: int, generator=None, label: str = "proj"):
        super().__init__()
        self.label = label
        self.weight = nn.Parameter(torch.randn(d_out, d_in, generator=generator) / d_in**0.5)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias, label=self.label)


class SelfAttentionBlock(nn.Module):
    """Pre-norm per-view self-attention; Q/K see content and position, V only content."""

    def __init__(self, C_s: int, pos_dim: int, heads: int, head_dim: int, generator=None):
        super().__init__()
        d = heads * head_dim
        self.heads = heads
        self.norm1 = _Norm(C_s)
        self.q = _Proj(C_s + pos_dim, d, generator, "self.q")
        self.k = _Proj(C_s + pos_dim, d, generator, "self.k")
        self.v = _Proj(C_s, d, generator, "self.v")
        self.o = _Proj(d, C_s, generator, "self.o")
        self.norm2 = _Norm(C_s)
        self.ffn = FFN(C_s, C_s, generator=generator, label="self.ffn")

    def forward(self, content: torch.Tensor, pos: torch.Tensor, mode: str = "per_view") -> torch.Tensor:
        """content (B, N_v, L, C_s), pos broadcastable to (B, N_v, L, P)."""
        pos = pos.expand(*content.shape[:-1], pos.shape[-1])
        h = self.norm1(content)
        qk_in = nx.concat([h, pos], axis=-1)
        q, k, v = self.q(qk_in), self.k(qk_in), self.v(h)
        if mode == "per_view":
            out = fused_attention(q, k, v, self.heads, label="self")
        elif mode == "masked_global":
            B, N_v, L, _ = q.shape
            mask = block_diagonal_mask(N_v, L)
            out, _ = multihead_attention(q.flatten(1, 2), k.flatten(1, 2), v.flatten(1, 2), self.heads,
                                         key_mask=mask, label="self")
            out = out.reshape(B, N_v, L, -1)
        else:
            raise ValueError(f"unknown self-attention mode {mode!r}")
        content = content + self.o(out)
        return content + self.ffn(self.norm2(content))


class CrossAttentionBlock(nn.Module):
    """Pre-norm BEV-to-image cross-attention routed through a window scheme."""

    def __init__(self, C_s: int, bev_pos_dim: int, img_pos_dim: int, heads: int, head_dim: int, generator=None):
        super().__init__()
        d = heads * head_dim
        self.heads = heads
        self.norm_q = _Norm(C_s)
        self.norm_kv = _Norm(C_s)
        self.q = _Proj(C_s + bev_pos_dim, d, generator, "cross.q")
        self.k = _Proj(C_s + img_pos_dim, d, generator, "cross.k")
        self.v = _Proj(C_s, d, generator, "cross.v")
        self.o = _Proj(d, C_s, generator, "cross.o")
        self.norm2 = _Norm(C_s)
        self.ffn = FFN(C_s, C_s, generator=generator, label="cross.ffn")
        self.last_attention: torch.Tensor | None = None

    def attend(self, bev_c, bev_p, img_c, img_p, scheme: WindowScheme, mode: str = "windowed",
               need_weights: bool = True):
        """Attention term only (before the output projection)."""
        bev_p = bev_p.expand(*bev_c.shape[:-1], bev_p.shape[-1])
        img_p = img_p.expand(*img_c.shape[:-1], img_p.shape[-1])
        kv = self.norm_kv(img_c)
        q = self.q(nx.concat([self.norm_q(bev_c), bev_p], axis=-1))
        k = self.k(nx.concat([kv, img_p], axis=-1))
        v = self.v(kv)
        if mode == "windowed":
            return windowed_cross_attention(q, k, v, scheme, self.heads, need_weights=need_weights)
        if mode == "masked_global":
            return masked_global_cross_attention(q, k, v, scheme, self.heads)
        raise ValueError(f"unknown cross-attention mode {mode!r}")

    def forward(self, bev_c, bev_p, img_c, img_p, scheme: WindowScheme, mode: str = "windowed",
                keep_attention: bool = False):
        out, attn = self.attend(bev_c, bev_p, img_c, img_p, scheme, mode, need_weights=keep_attention)
        self.last_attention = attn.detach() if keep_attention else None
        bev_c = bev_c + self.o(out)
        return bev_c + self.ffn(self.norm2(bev_c))


@dataclass(frozen=True)
class AttentionStack:
    n_self: int = 1
    n_cross: int = 2
    heads: int = 4
    head_dim: int = 8

    def __post_init__(self):
        if self.n_self < 0 or self.n_cross < 1:
            raise ValueError("need n_self >= 0 and n_cross >= 1")


class ViewAwareTransformer(nn.Module):
    def __init__(self, C_s: int, bev_pos_dim: int, img_pos_dim: int, stack: AttentionStack, generator=None):
        super().__init__()
        self.stack = stack
        self.self_blocks = nn.ModuleList(
            SelfAttentionBlock(C_s, img_pos_dim, stack.heads, stack.head_dim, generator) for _ in range(stack.n_self)
        )
        self.cross_blocks = nn.ModuleList(
            CrossAttentionBlock(C_s, bev_pos_dim, img_pos_dim, stack.heads, stack.head_dim, generator)
            for _ in range(stack.n_cross)
        )
        self.out_norm = _Norm(C_s)

    def forward(self, bev_c, bev_p, img_c, img_p, scheme: WindowScheme, mode: str = "windowed",
                keep_attention: bool = False) -> torch.Tensor:
        """bev_c (B, N_cells, C_s); img_c (B, N_v, L, C_s). Returns (B, N_cells, C_s)."""
        self_mode = "per_view" if mode == "windowed" else "masked_global"
        for block in self.self_blocks:
            img_c = block(img_c, img_p, mode=self_mode)
        for block in self.cross_blocks:
            bev_c = block(bev_c, bev_p, img_c, img_p, scheme, mode=mode, keep_attention=keep_attention)
        return self.out_norm(bev_c)


def cross_attention(P_bev: torch.Tensor, P_image: torch.Tensor, scheme: WindowScheme,
                    blocks: ViewAwareTransformer, C_s: int, mode: str = "windowed") -> torch.Tensor:
    """Run the cross-attention stack on restructured embeddings.

    P_bev (B|1, H_b, W_b, C_s + C_p) and P_image (B, N_v, H_s, W_s, C_s + P);
    content is the leading C_s channels. Returns F_B (B, H_b, W_b, C_s).
    """
    B = P_image.shape[0]
    H_b, W_b = P_bev.shape[-3:-1]
    bev = P_bev.reshape(P_bev.shape[0], H_b * W_b, -1).expand(B, -1, -1)
    img = P_image.flatten(2, 3)
    bev_c, bev_p = bev[..., :C_s], bev[..., C_s:]
    img_c, img_p = img[..., :C_s], img[..., C_s:]
    for block in blocks.cross_blocks:
        bev_c = block(bev_c, bev_p, img_c, img_p, scheme, mode=mode)
    return blocks.out_norm(bev_c).reshape(B, H_b, W_b, C_s)


def attention_maps(attn: torch.Tensor, scheme: WindowScheme, H_s: int, W_s: int) -> dict:
    """Head-averaged per-view weight maps for every BEV cell, from windowed weights.

    ``attn`` is (n_win, heads, pad_to, N_g * H_s * W_s) for one sample.
    Returns {(h, w): {view_index: (H_s, W_s) array}}.
    """
    H, W = scheme.assignment.shape
    mean = attn.mean(dim=1).cpu().numpy()
    maps = {}
    for w_id, group in enumerate(scheme.groups):
        for slot, cell in enumerate(scheme.index[w_id]):
            if not scheme.valid[w_id, slot]:
                continue
            row = mean[w_id, slot].reshape(len(group), H_s, W_s)
            maps[divmod(int(cell), W)] = {view: row[g] for g, view in enumerate(group)}
    return maps
