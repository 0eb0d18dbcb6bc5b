"""Center-based detection head on the 4x upsampled BEV map.

Regression channels per output cell::

    0 dx, 1 dy   center offset from the cell center, in cells
    2 z          center height (m)
    3-5          log l, log w, log h
    6 sin yaw, 7 cos yaw
    8 vx, 9 vy   (m/s)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .encodings import BevConfig

N_REG = 10
KERNEL_SIZE = 9
# kernel edge midpoints (4 cells from the center) sit at 0.05
GAUSSIAN_SIGMA = math.sqrt(16.0 / (2.0 * math.log(20.0)))


def normalize_yaw(yaw: float) -> float:
    """Map to (-pi, pi]."""
    yaw = math.remainder(yaw, 2 * math.pi)
    return math.pi if yaw == -math.pi else yaw


@dataclass
class DetectionBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.yaw = normalize_yaw(float(self.yaw))
        self.class_id = int(self.class_id)
        self.score = float(self.score)
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionBox":
        return cls(**d)


@dataclass
class HeadOutput:
    """heatmap (B, n_classes, 4H_b, 4W_b) in [0, 1]; regression (B, 10, 4H_b, 4W_b)."""

    heatmap: torch.Tensor
    regression: torch.Tensor
    heatmap_logits: torch.Tensor | None = None


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int = 3
    upsample: int = 4
    hidden: int = 16
    top_k: int = 50
    score_threshold: float = 0.1
    nms_radius: tuple[float, ...] = (1.5, 2.5, 0.5)   # meters, per class
    nms_scale: tuple[float, ...] = (1.0, 1.0, 1.0)

    def radius(self, class_id: int) -> float:
        return self.nms_radius[class_id] * self.nms_scale[class_id]


class DetectionHead(nn.Module):
    """Two stride-2 transposed convs, then a heatmap branch and one fused regression branch."""

    def __init__(self, C_s: int, cfg: HeadConfig = HeadConfig(), generator: torch.Generator | None = None):
        super().__init__()
        h = cfg.hidden
        self.cfg = cfg

        def param(*shape, fan_in):
            return nn.Parameter(torch.randn(*shape, generator=generator) * math.sqrt(2.0 / fan_in))

        self.up1_w = param(C_s, h, 2, 2, fan_in=C_s)
        self.up1_b = nn.Parameter(torch.zeros(h))
        self.up2_w = param(h, h, 2, 2, fan_in=h)
        self.up2_b = nn.Parameter(torch.zeros(h))
        self.hm1_w = param(h, h, 3, 3, fan_in=9 * h)
        self.hm1_b = nn.Parameter(torch.zeros(h))
        self.hm2_w = nn.Parameter(torch.randn(cfg.n_classes, h, 1, 1, generator=generator) * 0.01)
        # initial heatmap ~0.1, the usual center-net prior
        self.hm2_b = nn.Parameter(torch.full((cfg.n_classes,), -2.19))
        self.reg1_w = param(h, h, 3, 3, fan_in=9 * h)
        self.reg1_b = nn.Parameter(torch.zeros(h))
        self.reg2_w = nn.Parameter(torch.randn(N_REG, h, 1, 1, generator=generator) * 0.01)
        self.reg2_b = nn.Parameter(torch.zeros(N_REG))

    def forward(self, F_B: torch.Tensor) -> HeadOutput:
        """F_B (B, H_b, W_b, C_s) -> HeadOutput at 4x resolution."""
        if F_B.dim() != 4 or F_B.shape[-1] != self.up1_w.shape[0]:
            raise ValueError(f"expected (B, H_b, W_b, {self.up1_w.shape[0]}), got {tuple(F_B.shape)}")
        x = F_B.permute(0, 3, 1, 2)
        x = nx.relu(nx.conv_transpose2d(x, self.up1_w, self.up1_b, label="head.up1"))
        x = nx.relu(nx.conv_transpose2d(x, self.up2_w, self.up2_b, label="head.up2"))
        hm = nx.relu(nx.conv2d(x, self.hm1_w, self.hm1_b, padding=1, label="head.hm1"))
        logits = nx.conv2d(hm, self.hm2_w, self.hm2_b, label="head.hm2")
        reg = nx.relu(nx.conv2d(x, self.reg1_w, self.reg1_b, padding=1, label="head.reg1"))
        reg = nx.conv2d(reg, self.reg2_w, self.reg2_b, label="head.reg2")
        return HeadOutput(heatmap=nx.sigmoid(logits), regression=reg, heatmap_logits=logits)


def upsample_and_predict(F_B: torch.Tensor, head: DetectionHead) -> HeadOutput:
    return head(F_B)


def gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    d2 = r[:, None] ** 2 + r[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


@dataclass
class Targets:
    heatmap: torch.Tensor      # (n_classes, H, W)
    regression: torch.Tensor   # (10, H, W)
    mask: torch.Tensor         # (H, W) bool
    skipped: int = 0


def encode_box(box: DetectionBox, bev: BevConfig, scale: int) -> tuple[tuple[int, int], np.ndarray] | None:
    cell = bev.cell_of(box.center[0], box.center[1], scale)
    if cell is None:
        return None
    dx, dy = bev.cell_size
    dx, dy = dx / scale, dy / scale
    fx = (box.center[0] - bev.x_range[0]) / dx - (cell[0] + 0.5)
    fy = (box.center[1] - bev.y_range[0]) / dy - (cell[1] + 0.5)
    reg = np.array([fx, fy, box.center[2], *np.log(box.size), math.sin(box.yaw), math.cos(box.yaw),
                    *box.velocity])
    return cell, reg


def make_targets(gt_boxes: Sequence[DetectionBox], bev: BevConfig, head: HeadConfig = HeadConfig(),
                 dtype: torch.dtype | None = None) -> Targets:
    """Stamp a fixed 9x9 Gaussian per object (elementwise max) and write regression at its center cell."""
    s = head.upsample
    H, W = bev.H_b * s, bev.W_b * s
    hm = np.zeros((head.n_classes, H, W))
    reg = np.zeros((N_REG, H, W))
    mask = np.zeros((H, W), dtype=bool)
    kernel = gaussian_kernel()
    r = KERNEL_SIZE // 2
    skipped = 0
    for box in gt_boxes:
        enc = encode_box(box, bev, s)
        if enc is None:
            skipped += 1
            continue
        (i, j), values = enc
        i0, i1 = max(i - r, 0), min(i + r + 1, H)
        j0, j1 = max(j - r, 0), min(j + r + 1, W)
        patch = kernel[i0 - i + r : i1 - i + r, j0 - j + r : j1 - j + r]
        hm[box.class_id, i0:i1, j0:j1] = np.maximum(hm[box.class_id, i0:i1, j0:j1], patch)
        reg[:, i, j] = values
        mask[i, j] = True
    dtype = dtype or torch.get_default_dtype()
    return Targets(torch.as_tensor(hm, dtype=dtype), torch.as_tensor(reg, dtype=dtype),
                   torch.as_tensor(mask), skipped)


def focal_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 2.0, beta: float = 4.0,
               eps: float = 1e-6) -> torch.Tensor:
    """Penalty-reduced focal loss, summed over cells and divided by the positive count (min 1)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pred = pred.clamp(eps, 1.0 - eps)
    pos = gt.eq(1.0)
    pos_term = torch.log(pred) * (1.0 - pred) ** alpha
    neg_term = torch.log(1.0 - pred) * pred**alpha * (1.0 - gt) ** beta
    loss = -(torch.where(pos, pos_term, neg_term)).sum()
    return loss / max(int(pos.sum()), 1)


def reg_l1_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked cells and all channels; pred/gt (..., C, H, W), mask (..., H, W)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    m = mask.unsqueeze(-3).to(pred.dtype)
    n = m.sum() * pred.shape[-3]
    if n == 0:
        return (pred * 0.0).sum()
    return ((pred - gt).abs() * m).sum() / n


def decode(output: HeadOutput, bev: BevConfig, head: HeadConfig = HeadConfig(),
           top_k: int | None = None) -> list[list[DetectionBox]]:
    """Peak-pick, take top-K, decode to metric boxes, then class-wise scaled circular NMS."""
    top_k = head.top_k if top_k is None else top_k
    hm = output.heatmap.detach()
    reg = output.regression.detach()
    if hm.dim() == 3:
        hm, reg = hm[None], reg[None]
    B, C, H, W = hm.shape
    peaks = hm * (F.max_pool2d(hm, 3, stride=1, padding=1) == hm)
    dx = (bev.x_range[1] - bev.x_range[0]) / H
    dy = (bev.y_range[1] - bev.y_range[0]) / W
    results = []
    for b in range(B):
        if top_k <= 0:
            results.append([])
            continue
        scores, flat = peaks[b].reshape(-1).topk(min(top_k, C * H * W))
        boxes = []
        for score, f in zip(scores.tolist(), flat.tolist()):
            if score <= head.score_threshold:
                break
            c, rem = divmod(f, H * W)
            i, j = divmod(rem, W)
            r = reg[b, :, i, j].double().tolist()
            x = bev.x_range[0] + (i + 0.5 + r[0]) * dx
            y = bev.y_range[0] + (j + 0.5 + r[1]) * dy
            size = tuple(math.exp(min(v, 5.0)) for v in r[3:6])
            boxes.append(DetectionBox((x, y, r[2]), size, math.atan2(r[6], r[7]), (r[8], r[9]), c,
                                      min(max(score, 0.0), 1.0)))
        results.append(scale_nms(boxes, head))
    return results


def scale_nms(boxes: Sequence[DetectionBox], head: HeadConfig = HeadConfig()) -> list[DetectionBox]:
    """Greedy class-wise circular NMS with per-class scaled radii; output sorted by score."""
    kept: list[DetectionBox] = []
    for box in sorted(boxes, key=lambda b: -b.score):
        r = head.radius(box.class_id)
        if all(k.class_id != box.class_id or
               math.hypot(k.center[0] - box.center[0], k.center[1] - box.center[1]) > r for k in kept):
            kept.append(box)
    return kept


def dump_detections(path, detections: Sequence[Sequence[DetectionBox]], seeds: Sequence[int] | None = None) -> None:
    records = [
        {"sample": i if seeds is None else int(seeds[i]), "boxes": [b.to_dict() for b in dets]}
        for i, dets in enumerate(detections)
    ]
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
