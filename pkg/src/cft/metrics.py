"""nuScenes-style detection metrics: center-distance AP, TP errors and NDS.

Attributes are binary here (moving / static, speed threshold 0.2 m/s), and
per-class detection ranges collapse to the BEV perception range.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dethead import DetectionBox

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
TP_METRICS = ("ATE", "ASE", "AOE", "AVE", "AAE")
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
MOVING_SPEED = 0.2


def is_moving(box: DetectionBox) -> bool:
    return box.speed > MOVING_SPEED


@dataclass
class Match:
    """One prediction's fate: gt is the matched ground-truth box, None for a false positive."""

    pred: DetectionBox
    gt: DetectionBox | None
    distance: float = math.inf

    @property
    def is_tp(self) -> bool:
        return self.gt is not None


def center_distance(a: DetectionBox, b: DetectionBox) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def match(preds: Sequence[Sequence[DetectionBox]], gts: Sequence[Sequence[DetectionBox]],
          threshold: float, class_id: int | None = None) -> list[Match]:
    """Greedy matching by descending score across all scenes.

    Each prediction takes the nearest still-unmatched gt of its class in its
    own scene if that gt lies within ``threshold`` (inclusive).
    """
    flat = [(p.score, s, i, p) for s, scene in enumerate(preds) for i, p in enumerate(scene)
            if class_id is None or p.class_id == class_id]
    # stable: ties keep scene/list order
    flat.sort(key=lambda t: -t[0])
    taken = [set() for _ in gts]
    out = []
    for _, s, _, p in flat:
        best, best_d = None, math.inf
        for j, g in enumerate(gts[s]):
            if j in taken[s] or g.class_id != p.class_id:
                continue
            d = center_distance(p, g)
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d <= threshold:
            taken[s].add(best)
            out.append(Match(p, gts[s][best], best_d))
        else:
            out.append(Match(p, None))
    return out


def precision_recall(matches: Sequence[Match], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum([m.is_tp for m in matches], dtype=float)
    fp = np.cumsum([not m.is_tp for m in matches], dtype=float)
    return tp / np.maximum(tp + fp, 1e-12), tp / n_gt


def average_precision(matches: Sequence[Match], n_gt: int) -> float:
    """Area under the 101-point interpolated PR curve, dropping recall and precision below 0.1."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    if not matches:
        return 0.0
    prec, rec = precision_recall(matches, n_gt)
    prec = np.interp(np.linspace(0.0, 1.0, 101), rec, prec, right=0.0)
    prec = prec[round(100 * MIN_RECALL) + 1:] - MIN_PRECISION
    prec[prec < 0] = 0.0
    return float(np.mean(prec)) / (1.0 - MIN_PRECISION)


def aligned_iou(a: DetectionBox, b: DetectionBox) -> float:
    """3D IoU after moving both boxes to a common center and heading."""
    inter = math.prod(min(x, y) for x, y in zip(a.size, b.size))
    return inter / (math.prod(a.size) + math.prod(b.size) - inter)


def yaw_difference(a: float, b: float) -> float:
    return abs(math.remainder(a - b, 2 * math.pi))


def tp_errors(matches: Sequence[Match]) -> dict[str, float]:
    """Mean TP errors; every metric is 1.0 when there is no true positive."""
    tps = [m for m in matches if m.is_tp]
    if not tps:
        return {k: 1.0 for k in TP_METRICS}
    return {
        "ATE": float(np.mean([m.distance for m in tps])),
        "ASE": float(np.mean([1.0 - aligned_iou(m.pred, m.gt) for m in tps])),
        "AOE": float(np.mean([yaw_difference(m.pred.yaw, m.gt.yaw) for m in tps])),
        "AVE": float(np.mean([math.hypot(m.pred.velocity[0] - m.gt.velocity[0],
                                         m.pred.velocity[1] - m.gt.velocity[1]) for m in tps])),
        "AAE": float(np.mean([is_moving(m.pred) != is_moving(m.gt) for m in tps])),
    }


def nds(mAP: float, mATE: float, mASE: float, mAOE: float, mAVE: float, mAAE: float) -> float:
    return (5.0 * mAP + sum(max(1.0 - e, 0.0) for e in (mATE, mASE, mAOE, mAVE, mAAE))) / 10.0


@dataclass
class MetricsReport:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float
    NDS: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self, class_names: Sequence[str] | None = None) -> str:
        lines = [f"{'mAP':>6} {'mATE':>6} {'mASE':>6} {'mAOE':>6} {'mAVE':>6} {'mAAE':>6} {'NDS':>6}",
                 " ".join(f"{v:6.4f}" for v in (self.mAP, self.mATE, self.mASE, self.mAOE,
                                                 self.mAVE, self.mAAE, self.NDS)),
                 "",
                 f"{'class':<12}{'AP':>7}" + "".join(f"{k:>7}" for k in TP_METRICS)]
        for c, row in sorted(self.per_class.items()):
            name = class_names[c] if class_names else str(c)
            lines.append(f"{name:<12}{row['AP']:7.4f}" + "".join(f"{row[k]:7.4f}" for k in TP_METRICS))
        return "\n".join(lines)


def evaluate(preds: Sequence[Sequence[DetectionBox]], gts: Sequence[Sequence[DetectionBox]],
             n_classes: int) -> MetricsReport:
    """Per-class AP (mean over distance thresholds) and TP errors; classes without gt are skipped."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth scene counts differ")
    per_class = {}
    for c in range(n_classes):
        n_gt = sum(g.class_id == c for scene in gts for g in scene)
        if n_gt == 0:
            continue
        aps = [average_precision(match(preds, gts, t, c), n_gt) for t in AP_THRESHOLDS]
        row = {"AP": float(np.mean(aps))}
        row.update(tp_errors(match(preds, gts, TP_THRESHOLD, c)))
        per_class[c] = row
    if not per_class:
        raise ValueError("no ground truth in any class")
    mean = {k: float(np.mean([row[k] for row in per_class.values()])) for k in ("AP", *TP_METRICS)}
    fields = dict(mAP=mean["AP"], **{f"m{k}": mean[k] for k in TP_METRICS})
    return MetricsReport(**fields, NDS=nds(**fields), per_class=per_class)
