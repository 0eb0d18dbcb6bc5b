"""Synthetic surround-view world.

Boxes live in the ego frame (x forward, y left, z up). Six pinhole cameras
render each box as a class-colored Gaussian splat whose extent shrinks with
depth. The camera rig exists only here and in the projection baseline; the
calibration-free model never receives it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .dethead import DetectionBox, DetectionHead, HeadConfig, HeadOutput
from .encodings import BevConfig
from .views import N_VIEWS, VIEW_AZIMUTHS

CLASS_NAMES = ("car", "truck", "pedestrian")
CLASS_COLORS = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0]])
# mean (l, w, h) in meters
CLASS_SIZES = np.array([[4.5, 1.9, 1.7], [8.0, 2.6, 3.2], [0.8, 0.7, 1.75]])

DATASET_FORMAT = "cft-scenes"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    n_objects: tuple[int, int] = (1, 8)
    image_hw: tuple[int, int] = (64, 64)
    hfov_deg: float = 70.0
    camera_height: float = 1.6
    camera_offset: float = 1.0          # mount distance from the ego origin along the view axis
    ground_range: tuple[float, float] = (-1.5, 0.5)
    size_jitter: float = 0.1
    v_max: float = 0.0                  # 0 gives static scenes
    min_range: float = 4.0
    margin: float = 1.0
    min_separation: float = 2.0
    class_probs: tuple[float, ...] = (0.5, 0.2, 0.3)


@dataclass
class CameraRig:
    """Per-view intrinsics K (N_v, 3, 3), camera-to-ego rotations R and camera centers t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.K)

    def copy(self) -> "CameraRig":
        return CameraRig(self.K.copy(), self.R.copy(), self.t.copy())

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ego points (..., 3) -> pixel coords (N_v, ..., 2) and depth (N_v, ...)."""
        p = np.asarray(points, dtype=np.float64)
        rel = p[None] - self.t.reshape(-1, *([1] * (p.ndim - 1)), 3)
        cam = np.einsum("vji,v...j->v...i", self.R, rel)
        depth = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x, y = cam[..., 0] / depth, cam[..., 1] / depth
        fx, fy = self.K[:, 0, 0], self.K[:, 1, 1]
        cx, cy = self.K[:, 0, 2], self.K[:, 1, 2]
        shape = (-1,) + (1,) * (p.ndim - 1)
        u = fx.reshape(shape) * x + cx.reshape(shape)
        v = fy.reshape(shape) * y + cy.reshape(shape)
        return np.stack([u, v], axis=-1), depth

    def unproject(self, view: int, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        K = self.K[view]
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - K[0, 2]) / K[0, 0] * depth
        y = (uv[..., 1] - K[1, 2]) / K[1, 1] * depth
        cam = np.stack([x, y, depth], axis=-1)
        return cam @ self.R[view].T + self.t[view]


def default_rig(cfg: SceneConfig = SceneConfig()) -> CameraRig:
    H, W = cfg.image_hw
    f = (W / 2.0) / math.tan(math.radians(cfg.hfov_deg) / 2.0)
    K = np.tile(np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]]), (N_VIEWS, 1, 1))
    R = np.zeros((N_VIEWS, 3, 3))
    t = np.zeros((N_VIEWS, 3))
    for i, az in enumerate(np.radians(VIEW_AZIMUTHS)):
        forward = np.array([math.cos(az), math.sin(az), 0.0])
        right = np.array([math.sin(az), -math.cos(az), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R[i] = np.stack([right, down, forward], axis=1)
        t[i] = cfg.camera_offset * forward + np.array([0.0, 0.0, cfg.camera_height])
    return CameraRig(K, R, t)


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def rotation_angle(R: np.ndarray) -> float:
    return math.acos(min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0)))


def perturb_extrinsics(rig: CameraRig, sigma_rot_deg: float, sigma_trans_m: float,
                       rng: np.random.Generator) -> CameraRig:
    """Compose each view with a random small rotation and jitter its position; ``rig`` is untouched."""
    if sigma_rot_deg < 0 or sigma_trans_m < 0:
        raise ValueError("noise sigmas must be non-negative")
    out = rig.copy()
    if sigma_rot_deg == 0 and sigma_trans_m == 0:
        return out
    for v in range(rig.n_views):
        axis = rng.normal(size=3)
        angle = math.radians(rng.normal(0.0, sigma_rot_deg)) if sigma_rot_deg > 0 else 0.0
        if angle != 0.0:
            out.R[v] = axis_angle_matrix(axis, angle) @ rig.R[v]
        if sigma_trans_m > 0:
            out.t[v] = rig.t[v] + rng.normal(0.0, sigma_trans_m, size=3)
    return out


@dataclass
class SceneSample:
    boxes: list[DetectionBox]
    images: np.ndarray          # (N_v, H, W, 3) float32
    seed: int
    rig: CameraRig | None = None

    def images_tensor(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        """(N_v, 3, H, W)."""
        return torch.as_tensor(self.images, dtype=dtype or torch.get_default_dtype()).permute(0, 3, 1, 2)


def _sample_box(rng: np.random.Generator, cfg: SceneConfig, bev: BevConfig) -> DetectionBox:
    cls = int(rng.choice(len(CLASS_NAMES), p=np.asarray(cfg.class_probs) / np.sum(cfg.class_probs)))
    size = CLASS_SIZES[cls] * (1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3))
    x = rng.uniform(bev.x_range[0] + cfg.margin, bev.x_range[1] - cfg.margin)
    y = rng.uniform(bev.y_range[0] + cfg.margin, bev.y_range[1] - cfg.margin)
    z = rng.uniform(*cfg.ground_range) + size[2] / 2.0
    yaw = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(0.0, cfg.v_max) if cfg.v_max > 0 else 0.0
    vel = (speed * math.cos(yaw), speed * math.sin(yaw))
    return DetectionBox((x, y, z), tuple(size), yaw, vel, cls, 1.0)


def _diag(box: DetectionBox) -> float:
    return math.hypot(box.size[0], box.size[1])


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(), bev: BevConfig = BevConfig(),
                   rig: CameraRig | None = None) -> SceneSample:
    """Deterministic scene for ``seed``: boxes plus rendered surround views."""
    lo, hi = cfg.n_objects
    if lo < 0 or hi < lo:
        raise ValueError(f"bad object count range {cfg.n_objects}")
    span = min(bev.x_range[1] - bev.x_range[0], bev.y_range[1] - bev.y_range[0])
    if span <= 2 * cfg.margin or cfg.min_range >= span / 2:
        raise ValueError("perception range too small for the scene margins")
    tallest = CLASS_SIZES[:, 2].max() * (1.0 + cfg.size_jitter)
    if cfg.ground_range[0] < bev.z_range[0] or cfg.ground_range[1] + tallest > bev.z_range[1]:
        raise ValueError("object heights would leave the BEV height range")
    rig = default_rig(cfg) if rig is None else rig
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    boxes: list[DetectionBox] = []
    attempts = 0
    while len(boxes) < n and attempts < 1000:
        attempts += 1
        box = _sample_box(rng, cfg, bev)
        if math.hypot(box.center[0], box.center[1]) < cfg.min_range:
            continue
        if any(math.hypot(box.center[0] - b.center[0], box.center[1] - b.center[1])
               < max(cfg.min_separation, (_diag(box) + _diag(b)) / 2.0) for b in boxes):
            continue
        if not visible_views(box, rig, cfg):
            continue
        boxes.append(box)
    return SceneSample(boxes, render(boxes, rig, cfg), int(seed), rig)


def visible_views(box: DetectionBox, rig: CameraRig, cfg: SceneConfig) -> list[int]:
    uv, depth = rig.project(np.asarray(box.center))
    H, W = cfg.image_hw
    return [v for v in range(rig.n_views)
            if depth[v] > 0.5 and 0 <= uv[v, 0] < W and 0 <= uv[v, 1] < H]


def splat_params(box: DetectionBox, rig: CameraRig, view: int) -> tuple[float, float, float, float, float] | None:
    """(u, v, sigma_u, sigma_v, depth) of a box's splat in one view, or None when behind the camera."""
    uv, depth = rig.project(np.asarray(box.center))
    d = depth[view]
    if d <= 0.5:
        return None
    f = rig.K[view, 0, 0]
    cam_pos = rig.t[view]
    bearing = math.atan2(box.center[1] - cam_pos[1], box.center[0] - cam_pos[0])
    rel = box.yaw - bearing
    half_w = 0.5 * (abs(box.size[0] * math.sin(rel)) + abs(box.size[1] * math.cos(rel)))
    su = max(0.6, 0.5 * f * half_w / d)
    sv = max(0.6, 0.5 * f * 0.5 * box.size[2] / d)
    return float(uv[view, 0]), float(uv[view, 1]), su, sv, float(d)


def render(boxes: Sequence[DetectionBox], rig: CameraRig, cfg: SceneConfig = SceneConfig()) -> np.ndarray:
    H, W = cfg.image_hw
    images = np.zeros((rig.n_views, H, W, 3))
    us = np.arange(W) + 0.5
    vs = np.arange(H) + 0.5
    for box in boxes:
        for view in range(rig.n_views):
            p = splat_params(box, rig, view)
            if p is None:
                continue
            u, v, su, sv, d = p
            # centers far outside the frustum would smear a huge blob over the image
            if d < 1.0 or not (-0.25 * W < u < 1.25 * W and -0.25 * H < v < 1.25 * H):
                continue
            blob = np.exp(-0.5 * ((vs[:, None] - v) / sv) ** 2 - 0.5 * ((us[None, :] - u) / su) ** 2)
            images[view] = np.maximum(images[view], blob[..., None] * CLASS_COLORS[box.class_id])
    return images.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset container


def write_dataset(path: str | Path, samples: Sequence[SceneSample], cfg: SceneConfig, bev: BevConfig) -> None:
    """``path`` (binary, length-prefixed records) plus ``path.json`` manifest."""
    path = Path(path)
    offsets = []
    with open(path, "wb") as fh:
        for s in samples:
            header = json.dumps({"seed": s.seed, "boxes": [b.to_dict() for b in s.boxes],
                                 "shape": list(s.images.shape), "dtype": "float32"}, sort_keys=True).encode()
            payload = struct.pack("<I", len(header)) + header + np.ascontiguousarray(s.images, "<f4").tobytes()
            offsets.append(fh.tell())
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(samples),
                "seeds": [s.seed for s in samples], "offsets": offsets,
                "scene_config": asdict(cfg), "bev_config": asdict(bev)}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(path: str | Path) -> tuple[list[SceneSample], SceneConfig, BevConfig]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset manifest")
    cfg = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["scene_config"].items()})
    bev = BevConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["bev_config"].items()})
    rig = default_rig(cfg)
    samples = []
    data = path.read_bytes()
    pos = 0
    while pos < len(data):
        (n,) = struct.unpack_from("<Q", data, pos)
        payload = data[pos + 8 : pos + 8 + n]
        pos += 8 + n
        (hl,) = struct.unpack_from("<I", payload, 0)
        header = json.loads(payload[4 : 4 + hl])
        images = np.frombuffer(payload[4 + hl :], dtype="<f4").reshape(header["shape"]).astype(np.float32)
        boxes = [DetectionBox.from_dict(b) for b in header["boxes"]]
        samples.append(SceneSample(boxes, images, header["seed"], rig))
    if len(samples) != manifest["count"]:
        raise ValueError(f"{path}: manifest lists {manifest['count']} scenes, found {len(samples)}")
    return samples, cfg, bev


def generate_dataset(seeds: Sequence[int], cfg: SceneConfig = SceneConfig(),
                     bev: BevConfig = BevConfig()) -> list[SceneSample]:
    rig = default_rig(cfg)
    return [generate_scene(int(s), cfg, bev, rig) for s in seeds]


# ---------------------------------------------------------------------------
# camera-driven baseline


def bev_sampling_grid(rig: CameraRig, bev: BevConfig, image_hw: tuple[int, int], z_fixed: float,
                      subsample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Normalized grid_sample coords (N_v, h, w, 2) and validity (N_v, h, w) for BEV points at z_fixed."""
    centers = bev.grid_centers(subsample).numpy()
    pts = np.concatenate([centers, np.full(centers.shape[:-1] + (1,), z_fixed)], axis=-1)
    uv, depth = rig.project(pts)
    H, W = image_hw
    valid = (depth > 0.1) & (uv[..., 0] >= 0) & (uv[..., 0] <= W) & (uv[..., 1] >= 0) & (uv[..., 1] <= H)
    grid = np.stack([2.0 * uv[..., 0] / W - 1.0, 2.0 * uv[..., 1] / H - 1.0], axis=-1)
    grid = np.where(valid[..., None], grid, 0.0)
    return grid, valid


def sample_bev(images: torch.Tensor, grid: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Average bilinear samples over the views that see each point.

    images (B, N_v, C, H, W); grid (B|1, N_v, h, w, 2); valid (B|1, N_v, h, w).
    Returns (B, C, h, w); points no view sees get zeros.
    """
    B, N_v, C, H, W = images.shape
    grid = grid.expand(B, *grid.shape[1:]).to(images.dtype)
    valid = valid.expand(B, *valid.shape[1:]).to(images.dtype)
    samples = F.grid_sample(images.reshape(B * N_v, C, H, W), grid.reshape(B * N_v, *grid.shape[2:]),
                            mode="bilinear", padding_mode="zeros", align_corners=False)
    samples = samples.reshape(B, N_v, C, *grid.shape[2:4]) * valid[:, :, None]
    count = valid.sum(dim=1, keepdim=False)[:, None]
    return samples.sum(dim=1) / count.clamp(min=1.0)


class ProjectionBaseline(nn.Module):
    """Explicit camera-driven baseline: project BEV points into the views, sample, convolve, detect."""

    def __init__(self, bev: BevConfig, scene: SceneConfig = SceneConfig(), head: HeadConfig = HeadConfig(),
                 z_fixed: float = 0.5, subsample: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.bev, self.scene, self.z_fixed, self.subsample = bev, scene, z_fixed, subsample
        c_in = 3 * subsample * subsample
        C = bev.C_s
        self.conv1_w = nn.Parameter(torch.randn(C, c_in, 3, 3, generator=generator) * math.sqrt(2.0 / (9 * c_in)))
        self.conv1_b = nn.Parameter(torch.zeros(C))
        self.conv2_w = nn.Parameter(torch.randn(C, C, 3, 3, generator=generator) * math.sqrt(2.0 / (9 * C)))
        self.conv2_b = nn.Parameter(torch.zeros(C))
        self.head = DetectionHead(C, head, generator)
        self._grid_cache: dict = {}

    def grids(self, rigs: Sequence[CameraRig]) -> tuple[torch.Tensor, torch.Tensor]:
        grids, valids = [], []
        for rig in rigs:
            key = (rig.K.tobytes(), rig.R.tobytes(), rig.t.tobytes())
            if key not in self._grid_cache:
                g, v = bev_sampling_grid(rig, self.bev, self.scene.image_hw, self.z_fixed, self.subsample)
                if len(self._grid_cache) > 64:
                    self._grid_cache.clear()
                self._grid_cache[key] = (torch.from_numpy(g), torch.from_numpy(v))
            g, v = self._grid_cache[key]
            grids.append(g)
            valids.append(v)
        return torch.stack(grids), torch.stack(valids)

    def bev_features(self, images: torch.Tensor, rigs: Sequence[CameraRig]) -> torch.Tensor:
        grid, valid = self.grids(rigs)
        return sample_bev(images, grid, valid)

    def forward(self, images: torch.Tensor, rigs: Sequence[CameraRig]) -> tuple[torch.Tensor, HeadOutput]:
        """images (B, N_v, 3, H, W); one rig per sample (or a single shared one)."""
        if len(rigs) == 1 and images.shape[0] > 1:
            rigs = list(rigs) * images.shape[0]
        sampled = self.bev_features(images, rigs)
        x = F.pixel_unshuffle(sampled, self.subsample)
        x = nx.relu(nx.conv2d(x, self.conv1_w, self.conv1_b, padding=1, label="baseline.conv1"))
        x = nx.conv2d(x, self.conv2_w, self.conv2_b, padding=1, label="baseline.conv2")
        F_B = x.permute(0, 2, 3, 1)
        return F_B, self.head(F_B)


def projection_baseline(sample: SceneSample, rig: CameraRig, z_fixed: float = 0.5,
                        bev: BevConfig = BevConfig(), cfg: SceneConfig = SceneConfig(),
                        subsample: int = 1) -> torch.Tensor:
    """Unlearned BEV feature map (C, h, w) of one sample sampled through ``rig``."""
    grid, valid = bev_sampling_grid(rig, bev, cfg.image_hw, z_fixed, subsample)
    images = sample.images_tensor(torch.float64)[None]
    return sample_bev(images, torch.from_numpy(grid)[None], torch.from_numpy(valid)[None])[0]
