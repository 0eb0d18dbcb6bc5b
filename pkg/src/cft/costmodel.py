"""Closed-form cross-attention cost per scheme, and its instrumented counterpart.

Costs are fused multiply-adds for one cross-attention layer. The closed forms
size every window of a scheme by its largest member, so they count padding;
the instrumented count reports both the padded and the padding-free figure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch

from . import numerics as nx
from .va import SchemeKind


def polar_sector_area(H_b: int, W_b: int) -> float:
    """Cells in the largest of six polar sectors: 1/2 (H_b/2) (W_b - H_b / (2 sqrt 3))."""
    return 0.5 * (H_b / 2) * (W_b - H_b / (2 * math.sqrt(3)))


def analytic_cost(kind: SchemeKind | str, H_s: int, W_s: int, H_b: int, W_b: int, C: int) -> int:
    """Mul-adds of one cross-attention layer under ``kind``."""
    try:
        kind = SchemeKind(kind)
    except ValueError:
        raise ValueError(f"unknown scheme kind {kind!r}") from None
    L = H_s * W_s
    if kind is SchemeKind.GLOBAL:
        return 6 * L * H_b * W_b * C
    if kind is SchemeKind.REC2X2:
        return 4 * 3 * L * (H_b // 2) * (W_b // 2) * C
    if kind is SchemeKind.REC2X3:
        return 6 * 3 * L * (H_b // 2) * math.ceil(W_b / 3) * C
    S = math.ceil(polar_sector_area(H_b, W_b))
    if kind is SchemeKind.POLAR_A:
        return 6 * L * S * C
    return 6 * 2 * L * S * C


def coefficient(kind: SchemeKind | str, H_b: int = 64, W_b: int = 64) -> int:
    """Multiplier of H_s W_s C in :func:`analytic_cost`."""
    return analytic_cost(kind, 1, 1, H_b, W_b, 1)


@dataclass
class CostReport:
    kind: str
    analytic_muladds: int
    measured_muladds: float          # padded, per layer
    measured_valid_muladds: float    # padding excluded, per layer
    ratio_vs_global: float           # analytic / analytic(global)
    measured_ratio_vs_global: float  # padding-free measured / analytic(global)

    def __post_init__(self):
        if self.analytic_muladds <= 0:
            raise ValueError("analytic cost must be positive")
        if not 0 < self.ratio_vs_global <= 1:
            raise ValueError(f"ratio_vs_global {self.ratio_vs_global} outside (0, 1]")

    @property
    def padding_overhead(self) -> float:
        return self.measured_muladds / self.measured_valid_muladds - 1.0

    def to_dict(self) -> dict:
        return {**asdict(self), "padding_overhead": self.padding_overhead}


def _dims(model) -> tuple[int, int, int, int, int]:
    H_s, W_s = model.cfg.feature_hw
    bev = model.cfg.bev
    stack = model.cfg.stack
    return H_s, W_s, bev.H_b, bev.W_b, stack.heads * stack.head_dim


def measured_cost(model, images: torch.Tensor, counter: nx.OpCounter | None = None) -> CostReport:
    """Count score and value mul-adds of the cross-attention stack on one forward pass.

    ``images`` is (B, N_v, 3, H, W); the report is per sample and per layer.
    A passed-in ``counter`` must be empty.
    """
    if counter is not None and not counter.empty:
        raise RuntimeError("op counter carries counts from an earlier run; reset it first")
    with torch.no_grad(), nx.counting(counter) as c:
        model(images)
    n = images.shape[0] * model.cfg.stack.n_cross
    # score and value products each cost rows x keys x C; one layer's cost counts one of them
    padded = (c.total("cross.score") + c.total("cross.value")) / (2 * n)
    valid = (c.total("cross.score", valid=True) + c.total("cross.value", valid=True)) / (2 * n)
    dims = _dims(model)
    analytic = analytic_cost(model.scheme.kind, *dims)
    glob = analytic_cost(SchemeKind.GLOBAL, *dims)
    return CostReport(model.scheme.kind.value, analytic, padded, valid, analytic / glob, valid / glob)


def cost_table(kinds: Sequence[SchemeKind | str], H_s: int, W_s: int, H_b: int, W_b: int, C: int) -> list[dict]:
    """Analytic rows (no model) for the given geometry."""
    glob = analytic_cost(SchemeKind.GLOBAL, H_s, W_s, H_b, W_b, C)
    rows = []
    for kind in kinds:
        a = analytic_cost(kind, H_s, W_s, H_b, W_b, C)
        rows.append({"kind": SchemeKind(kind).value, "coefficient": coefficient(kind, H_b, W_b),
                     "analytic_muladds": a, "ratio_vs_global": a / glob})
    return rows


def write_rows(rows: list[dict], out_dir: str | Path, stem: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(rows, indent=1))
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
