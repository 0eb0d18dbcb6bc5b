"""The calibration-free transformer: backbone, PA, VA and detection head.

Nothing in this module takes camera intrinsics or extrinsics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .config import RunConfig
from .dethead import DetectionHead, HeadOutput
from .encodings import ImagePositions
from .pa import BevEmbedding, PaDesign, PositionAware, restructure
from .va import SchemeKind, ViewAwareTransformer, WindowScheme, _Proj, build_scheme


class Backbone(nn.Module):
    """Three 3x3 conv blocks with strides (2, 2, 1): 64x64 views -> 16x16 x C_s."""

    STRIDES = (2, 2, 1)

    def __init__(self, channels: tuple[int, ...], generator: torch.Generator | None = None):
        super().__init__()
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            w = torch.randn(c_out, c_in, 3, 3, generator=generator) * math.sqrt(2.0 / (9 * c_in))
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(c_out)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = len(self.weights)
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, self.STRIDES)):
            x = nx.conv2d(x, w, b, stride=s, padding=1, label=f"backbone.conv{i}")
            if i < n - 1:
                x = nx.relu(x)
        return x


@dataclass
class CFTOutput:
    F_B: torch.Tensor            # (B, H_b, W_b, C_s)
    bev: BevEmbedding
    head: HeadOutput


class CFTModel(nn.Module):
    def __init__(self, cfg: RunConfig, design: PaDesign | str | None = None,
                 scheme: SchemeKind | str | None = None):
        super().__init__()
        design = PaDesign(design or cfg.design)
        scheme_kind = SchemeKind(scheme or cfg.scheme)
        self.cfg = cfg.with_(design=design, scheme=scheme_kind)
        gen = nx.seeded(cfg.seed)
        bev = cfg.bev
        H_s, W_s = cfg.feature_hw
        self.backbone = Backbone((3, *cfg.backbone_channels, bev.C_s), gen)
        self.positions = ImagePositions(cfg.n_views, H_s, W_s, cfg.img_pos_dim, gen)
        self.pa = PositionAware(bev, design, gen)
        restructured = design.uses_height_path
        img_pos = 3 * cfg.img_pos_dim
        if not restructured:
            # implicit design: positions are projected and summed onto content
            self.image_pos_mix = _Proj(img_pos, bev.C_s, gen, "implicit.mix")
        self.transformer = ViewAwareTransformer(
            bev.C_s, bev.C_p if restructured else 0, img_pos if restructured else 0, cfg.stack, gen
        )
        self.head = DetectionHead(bev.C_s, cfg.head, gen)
        self.scheme: WindowScheme = build_scheme(scheme_kind, bev, cfg.n_views)

    @property
    def design(self) -> PaDesign:
        return self.cfg.design

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, N_v, 3, H, W) -> F_s (B, N_v, H_s, W_s, C_s)."""
        B, N_v = images.shape[:2]
        if N_v != self.cfg.n_views:
            raise ValueError(f"model expects {self.cfg.n_views} views, got {N_v}")
        f = self.backbone(images.flatten(0, 1))
        return f.reshape(B, N_v, *f.shape[1:]).permute(0, 1, 3, 4, 2)

    def tokens(self, F_s: torch.Tensor, zero_modulation: bool = False):
        """Returns (bev_c, bev_p, img_c, img_p, embedding), flattened for attention."""
        B = F_s.shape[0]
        C_s = self.cfg.bev.C_s
        bundle = self.positions()
        emb = self.pa(zero_modulation=zero_modulation)
        if self.design.uses_height_path:
            P_image, P_bev = restructure(F_s, bundle, emb.Q_c, emb.Q_ep)
            bev = P_bev.reshape(1, -1, P_bev.shape[-1])
            img = P_image.flatten(2, 3)
            return bev[..., :C_s].expand(B, -1, -1), bev[..., C_s:], img[..., :C_s], img[..., C_s:], emb
        mixed_img = nx.add(F_s, self.image_pos_mix(bundle.expanded()))
        mixed_bev = nx.add(emb.Q_c, emb.Q_p).reshape(1, -1, C_s)
        img = mixed_img.flatten(2, 3)
        return (mixed_bev.expand(B, -1, -1), mixed_bev.new_zeros(1, mixed_bev.shape[1], 0),
                img, img.new_zeros(1, *img.shape[1:3], 0), emb)

    def forward(self, images: torch.Tensor, mode: str = "windowed", keep_attention: bool = False,
                zero_modulation: bool = False) -> CFTOutput:
        F_s = self.image_features(images)
        bev_c, bev_p, img_c, img_p, emb = self.tokens(F_s, zero_modulation)
        out = self.transformer(bev_c, bev_p, img_c, img_p, self.scheme, mode=mode, keep_attention=keep_attention)
        F_B = out.reshape(images.shape[0], self.cfg.bev.H_b, self.cfg.bev.W_b, -1)
        return CFTOutput(F_B, emb, self.head(F_B))


def cft_forward(images: torch.Tensor, model: CFTModel) -> torch.Tensor:
    """BEV representation F_B from surround-view images alone."""
    return model(images).F_B
