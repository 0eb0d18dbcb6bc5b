"""Position-aware enhancement of the BEV embedding.

A reference height is predicted per BEV cell from its 2D positional
embedding, sinusoidally encoded, modulated by a content-derived matrix and
added back onto the positional embedding. Content and position channels are
then kept in separate slices for attention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .encodings import BevConfig, PositionBundle, bev_coordinate_embedding, sinusoidal_encode


class PaDesign(str, enum.Enum):
    IMPLICIT = "implicit"
    EXPLICIT = "explicit"
    ENHANCED_IMPLICIT = "enhanced_implicit"

    @property
    def uses_height_path(self) -> bool:
        return self is not PaDesign.IMPLICIT


@dataclass
class BevEmbedding:
    """BEV-side embeddings; the height fields are None for the implicit design."""

    Q_p: torch.Tensor
    Q_c: torch.Tensor
    z_ref: torch.Tensor | None = None
    Q_ref: torch.Tensor | None = None
    M: torch.Tensor | None = None
    Q_ep: torch.Tensor | None = None
    P_bev: torch.Tensor | None = None


class FFN(nn.Module):
    """Two affine layers with a rectifier in between (hidden = 2x input by default)."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None,
                 generator: torch.Generator | None = None, zero_last: bool = False, label: str = "ffn"):
        super().__init__()
        hidden = hidden or 2 * d_in
        self.label = label
        self.w1 = nn.Parameter(torch.randn(hidden, d_in, generator=generator) / d_in**0.5)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        w2 = torch.randn(d_out, hidden, generator=generator) / hidden**0.5
        self.w2 = nn.Parameter(torch.zeros_like(w2) if zero_last else w2)
        self.b2 = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.ffn(x, self.w1, self.b1, self.w2, self.b2, label=self.label)


def reference_height(Q_p: torch.Tensor, z_range: tuple[float, float], height_ffn: FFN | None = None,
                     logits: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """z_ref = z_min + (z_max - z_min) * sigmoid(FFN(Q_p)); Q_ref = sinusoid(z_ref).

    ``logits`` overrides the FFN output (used to probe the saturation limits).
    Returns z_ref (H, W, 1) in meters and Q_ref (H, W, C_p).
    """
    z_min, z_max = z_range
    if not z_min < z_max:
        raise ValueError(f"degenerate height range {z_range}")
    if logits is None:
        if height_ffn is None:
            raise ValueError("need a height FFN or explicit logits")
        logits = height_ffn(Q_p)
    z_ref = z_min + (z_max - z_min) * nx.sigmoid(logits)
    Q_ref = sinusoidal_encode(z_ref[..., 0], Q_p.shape[-1])
    return z_ref, Q_ref


def enhance_position(Q_p: torch.Tensor, Q_c: torch.Tensor, Q_ref: torch.Tensor,
                     modulation_ffn: FFN | None = None,
                     M: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """M = FFN(Q_c); Q_ep = M * Q_ref + Q_p, channelwise per cell."""
    if M is None:
        if modulation_ffn is None:
            raise ValueError("need a modulation FFN or an explicit M")
        M = modulation_ffn(Q_c)
    if M.shape != Q_ref.shape or Q_ref.shape != Q_p.shape:
        raise ValueError(f"channel mismatch: M {tuple(M.shape)}, Q_ref {tuple(Q_ref.shape)}, Q_p {tuple(Q_p.shape)}")
    return M, nx.add(nx.elementwise_mul(M, Q_ref), Q_p)


def restructure(F_s: torch.Tensor, bundle: PositionBundle, Q_c: torch.Tensor,
                Q_ep: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """P_image = cat(F_s, P_x, P_y, P_v); P_bev = cat(Q_c, Q_ep).

    Content always occupies channels [0, C_s), position the rest.
    ``F_s`` is (..., N_v, H_s, W_s, C_s); leading batch axes are broadcast.
    """
    pos = bundle.expanded()
    if F_s.shape[-4:-1] != pos.shape[:-1]:
        raise ValueError(f"feature grid {tuple(F_s.shape[-4:-1])} != encoding grid {tuple(pos.shape[:-1])}")
    pos = pos.expand(*F_s.shape[:-1], pos.shape[-1])
    if Q_c.shape[:-1] != Q_ep.shape[:-1]:
        raise ValueError("Q_c and Q_ep grids differ")
    return nx.concat([F_s, pos], axis=-1), nx.concat([Q_c, Q_ep], axis=-1)


def height_loss(z_ref: torch.Tensor | None, gt_boxes: Sequence[Sequence], design: PaDesign,
                cfg: BevConfig) -> torch.Tensor:
    """Mean |z_ref - z_gt| over BEV cells holding a ground-truth box center.

    ``gt_boxes`` is one box list per sample (objects with ``.center``);
    ``z_ref`` is shared across samples. Zero unless the design is explicit.
    """
    if design is not PaDesign.EXPLICIT or z_ref is None:
        return torch.zeros(())
    preds, targets = [], []
    for boxes in gt_boxes:
        for box in boxes:
            cell = cfg.cell_of(box.center[0], box.center[1])
            if cell is None:
                continue
            preds.append(z_ref[cell[0], cell[1], 0])
            targets.append(box.center[2])
    if not preds:
        return z_ref.sum() * 0.0
    pred = torch.stack(preds)
    return (pred - torch.as_tensor(targets, dtype=pred.dtype)).abs().mean()


class PositionAware(nn.Module):
    """Learned BEV embeddings plus the height / modulation FFNs."""

    def __init__(self, cfg: BevConfig, design: PaDesign = PaDesign.EXPLICIT,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.design = PaDesign(design)
        self.Q_p = nn.Parameter(bev_coordinate_embedding(cfg).clone())
        self.Q_c = nn.Parameter(torch.randn(cfg.H_b, cfg.W_b, cfg.C_s, generator=generator) * 0.1)
        if self.design.uses_height_path:
            # zero last layer: z_ref starts at the middle of the height range
            self.height_ffn = FFN(cfg.C_p, 1, generator=generator, zero_last=True, label="pa.height")
            self.modulation_ffn = FFN(cfg.C_s, cfg.C_p, generator=generator, label="pa.modulation")
        elif cfg.C_p != cfg.C_s:
            raise ValueError("the implicit design sums content and position, so C_p must equal C_s")

    def forward(self, zero_modulation: bool = False) -> BevEmbedding:
        emb = BevEmbedding(Q_p=self.Q_p, Q_c=self.Q_c)
        if not self.design.uses_height_path:
            return emb
        emb.z_ref, emb.Q_ref = reference_height(self.Q_p, self.cfg.z_range, self.height_ffn)
        M = torch.zeros_like(emb.Q_ref) if zero_modulation else None
        emb.M, emb.Q_ep = enhance_position(self.Q_p, self.Q_c, emb.Q_ref, self.modulation_ffn, M=M)
        emb.P_bev = nx.concat([self.Q_c, emb.Q_ep], axis=-1)
        return emb
