"""Positional and view encodings for the BEV plane and the image views."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx

TEMPERATURE = 10000.0


@dataclass(frozen=True)
class BevConfig:
    """BEV grid extents, channel widths and metric bounds.

    Rows (``h``) run along ego ``x`` (forward), columns (``w``) along ego
    ``y`` (left); both ascend from the range minimum.
    """

    H_b: int = 16
    W_b: int = 16
    C_p: int = 32
    C_s: int = 32
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-3.0, 5.0)

    def __post_init__(self):
        for name in ("H_b", "W_b", "C_p", "C_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.C_p % 2:
            raise ValueError("C_p must be even")
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must have min < max, got {(lo, hi)}")

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.x_range[1] - self.x_range[0]) / self.H_b,
                (self.y_range[1] - self.y_range[0]) / self.W_b)

    def grid_centers(self, scale: int = 1) -> torch.Tensor:
        """Metric (x, y) of cell centers, shape (H_b*scale, W_b*scale, 2), float64."""
        h, w = self.H_b * scale, self.W_b * scale
        dx = (self.x_range[1] - self.x_range[0]) / h
        dy = (self.y_range[1] - self.y_range[0]) / w
        xs = self.x_range[0] + (torch.arange(h, dtype=torch.float64) + 0.5) * dx
        ys = self.y_range[0] + (torch.arange(w, dtype=torch.float64) + 0.5) * dy
        gx, gy = torch.meshgrid(xs, ys, indexing="ij")
        return torch.stack([gx, gy], dim=-1)

    def cell_of(self, x: float, y: float, scale: int = 1) -> tuple[int, int] | None:
        """Grid cell containing metric point (x, y), or None when outside."""
        dx, dy = self.cell_size
        i = int((x - self.x_range[0]) // (dx / scale))
        j = int((y - self.y_range[0]) // (dy / scale))
        if 0 <= i < self.H_b * scale and 0 <= j < self.W_b * scale:
            return i, j
        return None


def sinusoidal_encode(values: torch.Tensor, dim: int, temperature: float = TEMPERATURE) -> torch.Tensor:
    """Interleaved ``[sin, cos]`` pairs of ``value / temperature**(2i/dim)``.

    Adds a trailing channel axis of size ``dim``.
    """
    if dim % 2:
        raise ValueError(f"sinusoidal dim must be even, got {dim}")
    values = torch.as_tensor(values, dtype=torch.get_default_dtype()) if not torch.is_tensor(values) else values
    i = torch.arange(dim // 2, dtype=values.dtype, device=values.device)
    freq = temperature ** (-2.0 * i / dim)
    angle = values.unsqueeze(-1) * freq
    out = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1)
    return out.flatten(-2)


def bev_coordinate_embedding(cfg: BevConfig, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Initial value of Q_p: x and y grid-center coordinates, C_p/2 channels each."""
    half = cfg.C_p // 2
    if half % 2:
        raise ValueError("C_p must be divisible by 4 to split between x and y")
    centers = cfg.grid_centers().to(dtype or torch.get_default_dtype())
    return nx.concat([sinusoidal_encode(centers[..., 0], half), sinusoidal_encode(centers[..., 1], half)], axis=-1)


@dataclass
class PositionBundle:
    """Image-side encodings. P_x/P_y: (N_v, H_s, W_s, ch) fixed; P_v: (N_v, ch) learned."""

    P_x: torch.Tensor
    P_y: torch.Tensor
    P_v: torch.Tensor

    @property
    def width(self) -> int:
        return self.P_x.shape[-1] + self.P_y.shape[-1] + self.P_v.shape[-1]

    def expanded(self) -> torch.Tensor:
        """cat(P_x, P_y, P_v) broadcast over pixels: (N_v, H_s, W_s, width)."""
        pv = self.P_v[:, None, None, :].expand(*self.P_x.shape[:-1], self.P_v.shape[-1])
        return nx.concat([self.P_x, self.P_y, pv], axis=-1)


def pixel_encodings(N_v: int, H_s: int, W_s: int, channels: int, scale: float = 16.0):
    """Fixed P_x (by column) and P_y (by row) over normalized pixel coordinates.

    The normalized coordinate ``col / W_s`` is multiplied by ``scale`` so the
    highest sinusoid frequency resolves neighbouring columns.
    """
    if min(N_v, H_s, W_s, channels) <= 0:
        raise ValueError("extents must be positive")
    u = torch.arange(W_s, dtype=torch.get_default_dtype()) / W_s * scale
    v = torch.arange(H_s, dtype=torch.get_default_dtype()) / H_s * scale
    px = sinusoidal_encode(u, channels)[None, None, :, :].expand(N_v, H_s, W_s, channels)
    py = sinusoidal_encode(v, channels)[None, :, None, :].expand(N_v, H_s, W_s, channels)
    return px.contiguous(), py.contiguous()


class ImagePositions(nn.Module):
    """Holds the fixed pixel encodings and the learned per-view table P_v."""

    def __init__(self, N_v: int, H_s: int, W_s: int, channels: int, generator: torch.Generator | None = None):
        super().__init__()
        px, py = pixel_encodings(N_v, H_s, W_s, channels)
        self.register_buffer("P_x", px)
        self.register_buffer("P_y", py)
        self.P_v = nn.Parameter(torch.randn(N_v, channels, generator=generator) * 0.5)

    def forward(self) -> PositionBundle:
        return PositionBundle(self.P_x, self.P_y, self.P_v)


def image_position_bundle(N_v: int, H_s: int, W_s: int, channels: int,
                          generator: torch.Generator | None = None) -> PositionBundle:
    return ImagePositions(N_v, H_s, W_s, channels, generator)()
