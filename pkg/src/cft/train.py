"""Training and evaluation loops for the CFT model and the projection baseline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import numerics as nx
from .config import RunConfig
from .dethead import DetectionBox, HeadOutput, decode, dump_detections, focal_loss, make_targets, reg_l1_loss
from .metrics import MetricsReport, evaluate as evaluate_boxes
from .model import CFTModel
from .pa import height_loss
from .scenegen import CameraRig, ProjectionBaseline, SceneSample, default_rig, generate_dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batchable:
    """Scenes stacked into tensors once, with their head targets."""

    samples: list[SceneSample]
    images: torch.Tensor        # (N, N_v, 3, H, W)
    heatmaps: torch.Tensor      # (N, n_classes, 4H_b, 4W_b)
    regression: torch.Tensor    # (N, 10, 4H_b, 4W_b)
    masks: torch.Tensor         # (N, 4H_b, 4W_b)

    def __len__(self):
        return len(self.samples)

    @classmethod
    def build(cls, samples: Sequence[SceneSample], cfg: RunConfig, dtype=torch.float32) -> "Batchable":
        targets = [make_targets(s.boxes, cfg.bev, cfg.head, dtype) for s in samples]
        return cls(list(samples), torch.stack([s.images_tensor(dtype) for s in samples]),
                   torch.stack([t.heatmap for t in targets]), torch.stack([t.regression for t in targets]),
                   torch.stack([t.mask for t in targets]))


def make_data(cfg: RunConfig, split: str, dtype=torch.float32) -> Batchable:
    seeds = cfg.train_seeds() if split == "train" else cfg.eval_seeds()
    return Batchable.build(generate_dataset(seeds, cfg.scene, cfg.bev), cfg, dtype)


def detection_losses(head: HeadOutput, heatmaps, regression, masks) -> dict[str, torch.Tensor]:
    return {"focal": focal_loss(head.heatmap, heatmaps), "reg": reg_l1_loss(head.regression, regression, masks)}


def cft_loss(model: CFTModel, images, heatmaps, regression, masks, boxes) -> dict[str, torch.Tensor]:
    out = model(images)
    losses = detection_losses(out.head, heatmaps, regression, masks)
    losses["height"] = height_loss(out.bev.z_ref, boxes, model.design, model.cfg.bev).to(images.dtype)
    losses["total"] = losses["focal"] + losses["reg"] + losses["height"]
    return losses


def baseline_loss(model: ProjectionBaseline, images, heatmaps, regression, masks, rigs) -> dict[str, torch.Tensor]:
    _, head = model(images, rigs)
    losses = detection_losses(head, heatmaps, regression, masks)
    losses["total"] = losses["focal"] + losses["reg"]
    return losses


@dataclass
class TrainResult:
    model: torch.nn.Module
    curve: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train(model: torch.nn.Module, data: Batchable, cfg: RunConfig, epochs: int | None = None,
          lr: float | None = None, curve_path: str | Path | None = None, seed: int | None = None) -> TrainResult:
    """AdamW with step decay; deterministic given ``seed`` (defaults to cfg.seed)."""
    tc = cfg.train
    epochs = tc.epochs if epochs is None else epochs
    lr = tc.lr if lr is None else lr
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    shuffle = nx.seeded(seed + 7919)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=tc.weight_decay)
    milestones = sorted({max(1, round(m * epochs)) for m in tc.milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=tc.gamma)
    is_baseline = isinstance(model, ProjectionBaseline)
    rig = default_rig(cfg.scene)
    result = TrainResult(model)
    start = time.perf_counter()
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=shuffle).tolist()
        sums: dict[str, float] = {}
        n_batches = 0
        for i in range(0, len(order), tc.batch_size):
            idx = order[i : i + tc.batch_size]
            args = (data.images[idx], data.heatmaps[idx], data.regression[idx], data.masks[idx])
            try:
                if is_baseline:
                    losses = baseline_loss(model, *args, [rig])
                else:
                    losses = cft_loss(model, *args, [data.samples[j].boxes for j in idx])
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite forward pass at epoch {epoch}, batch {i // tc.batch_size}: {exc}") from exc
            total = losses["total"]
            values = {k: float(v.detach()) for k, v in losses.items()}
            if not math.isfinite(values["total"]):
                raise TrainingDiverged(f"loss became {values['total']} at epoch {epoch}, batch {i // tc.batch_size}: "
                                       + ", ".join(f"{k}={v:.4g}" for k, v in values.items()))
            opt.zero_grad(set_to_none=True)
            nx.backward(total)
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        sched.step()
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        result.curve.append(row)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    result.seconds = time.perf_counter() - start
    model.eval()
    if curve_path is not None:
        write_curve(curve_path, result.curve)
    return result


def write_curve(path: str | Path, curve: list[dict]) -> None:
    keys = sorted({k for row in curve for k in row}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


@torch.no_grad()
def predict(model: torch.nn.Module, data: Batchable, cfg: RunConfig, rigs: Sequence[CameraRig] | None = None,
            batch_size: int = 16) -> list[list[DetectionBox]]:
    """Decoded detections per scene. ``rigs`` (one per scene) is only consulted by the baseline."""
    model.eval()
    dets: list[list[DetectionBox]] = []
    for i in range(0, len(data), batch_size):
        images = data.images[i : i + batch_size]
        if isinstance(model, ProjectionBaseline):
            batch_rigs = list(rigs[i : i + batch_size]) if rigs is not None else [default_rig(cfg.scene)]
            _, head = model(images, batch_rigs)
        else:
            head = model(images).head
        dets.extend(decode(head, cfg.bev, cfg.head))
    return dets


def evaluate(model: torch.nn.Module, data: Batchable, cfg: RunConfig, rigs: Sequence[CameraRig] | None = None,
             detections_path: str | Path | None = None) -> MetricsReport:
    dets = predict(model, data, cfg, rigs)
    if detections_path is not None:
        dump_detections(detections_path, dets, [s.seed for s in data.samples])
    return evaluate_boxes(dets, [s.boxes for s in data.samples], cfg.head.n_classes)


def build_model(cfg: RunConfig, kind: str = "cft") -> torch.nn.Module:
    if kind == "cft":
        return CFTModel(cfg)
    if kind == "baseline":
        return ProjectionBaseline(cfg.bev, cfg.scene, cfg.head, cfg.baseline_z, cfg.baseline_subsample,
                                  nx.seeded(cfg.seed))
    raise ValueError(f"unknown model kind {kind!r}")


def checkpoint_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_model(path: str | Path, model: torch.nn.Module, cfg: RunConfig, kind: str) -> None:
    nx.save_checkpoint(path, checkpoint_tensors(model), {"kind": kind, "config": cfg.to_dict()})


def load_model(path: str | Path) -> tuple[torch.nn.Module, RunConfig, str]:
    tensors, meta = nx.load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg, meta["kind"])
    model.load_state_dict(tensors)
    model.eval()
    return model, cfg, meta["kind"]
