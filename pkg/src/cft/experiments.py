"""The three desk experiments: embedding design, window scheme, extrinsics noise."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .costmodel import measured_cost
from .metrics import MetricsReport
from .model import CFTModel
from .pa import PaDesign
from .scenegen import default_rig, perturb_extrinsics
from .train import Batchable, build_model, evaluate, make_data, predict, save_model, train
from .va import SchemeKind

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
NOISE_LEVELS_DEG = (0.0, 0.5, 1.0, 2.0, 4.0)


@dataclass
class ExperimentResult:
    name: str
    rows: list[dict]
    summary: dict
    config: dict
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)    # in-memory only, never written

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"name": self.name, "rows": self.rows, "summary": self.summary, "config": self.config,
               "seconds": self.seconds, **self.extra}
        (out / f"{self.name}.json").write_text(json.dumps(doc, indent=1, default=_jsonable))
        write_csv(out / f"{self.name}.csv", self.rows)
        (out / "config.json").write_text(json.dumps(self.config, indent=1, sort_keys=True))


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_csv(path: str | Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    values = list(values)
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def compare(a: Sequence[float], b: Sequence[float]) -> str:
    """'greater' / 'less' when the mean gap exceeds the larger of the two seed std-devs, else 'inconclusive'."""
    ma, sa = mean_std(a)
    mb, sb = mean_std(b)
    spread = max(sa, sb)
    if abs(ma - mb) <= spread:
        return "inconclusive"
    return "greater" if ma > mb else "less"


def _report_row(report: MetricsReport) -> dict:
    return {"NDS": report.NDS, "mAP": report.mAP, "mATE": report.mATE, "mASE": report.mASE,
            "mAOE": report.mAOE, "mAVE": report.mAVE, "mAAE": report.mAAE}


def _data(cfg: RunConfig, train_data: Batchable | None, eval_data: Batchable | None):
    return (train_data if train_data is not None else make_data(cfg, "train"),
            eval_data if eval_data is not None else make_data(cfg, "eval"))


def fit(cfg: RunConfig, kind: str, seed: int, train_data: Batchable, out_dir: Path | None = None,
        tag: str = "") -> torch.nn.Module:
    run_cfg = cfg.with_(seed=seed)
    model = build_model(run_cfg, kind)
    curve = None if out_dir is None else out_dir / f"loss_{tag or kind}_seed{seed}.csv"
    train(model, train_data, run_cfg, curve_path=curve)
    if out_dir is not None:
        save_model(out_dir / f"model_{tag or kind}_seed{seed}.json", model, run_cfg, kind)
    return model


def experiment_embedding(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, out_dir: str | Path | None = None,
                         designs: Sequence[PaDesign | str] = tuple(PaDesign),
                         train_data: Batchable | None = None, eval_data: Batchable | None = None) -> ExperimentResult:
    """Train each PA design on the same data with the same seeds and compare eval scores."""
    start = time.perf_counter()
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_data, eval_data = _data(cfg, train_data, eval_data)
    rows, scores, models = [], {}, {}
    for design in map(PaDesign, designs):
        for seed in seeds:
            model = fit(cfg.with_(design=design), "cft", seed, train_data, out, tag=design.value)
            models.setdefault(design.value, []).append(model)
            report = evaluate(model, eval_data, model.cfg)
            rows.append({"design": design.value, "seed": seed, **_report_row(report)})
            scores.setdefault(design.value, []).append(report.NDS)
            log.info("embedding %s seed %d NDS %.4f", design.value, seed, report.NDS)
    summary = {d: dict(zip(("mean", "std"), mean_std(s))) for d, s in scores.items()}
    imp = PaDesign.IMPLICIT.value
    for other in (PaDesign.EXPLICIT.value, PaDesign.ENHANCED_IMPLICIT.value):
        if other in scores and imp in scores:
            summary[f"{other}_vs_{imp}"] = compare(scores[other], scores[imp])
    result = ExperimentResult("exp_embedding", rows, summary, cfg.to_dict(), time.perf_counter() - start,
                              models=models)
    if out is not None:
        result.write(out)
    return result


def experiment_windows(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, out_dir: str | Path | None = None,
                       schemes: Sequence[SchemeKind | str] = tuple(SchemeKind),
                       train_data: Batchable | None = None, eval_data: Batchable | None = None) -> ExperimentResult:
    """Score and per-layer attention cost of every window scheme."""
    start = time.perf_counter()
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_data, eval_data = _data(cfg, train_data, eval_data)
    rows, summary = [], {}
    for scheme in map(SchemeKind, schemes):
        scores = []
        for seed in seeds:
            model = fit(cfg.with_(scheme=scheme), "cft", seed, train_data, out, tag=scheme.value)
            report = evaluate(model, eval_data, model.cfg)
            scores.append(report.NDS)
            rows.append({"scheme": scheme.value, "seed": seed, **_report_row(report)})
        cost = measured_cost(model, eval_data.images[:1])
        mean, std = mean_std(scores)
        summary[scheme.value] = {"NDS_mean": mean, "NDS_std": std, **cost.to_dict()}
    result = ExperimentResult("exp_windows", rows, summary, cfg.to_dict(), time.perf_counter() - start)
    if out is not None:
        result.write(out)
    return result


def noisy_rigs(cfg: RunConfig, n: int, sigma_rot_deg: float, sigma_trans_m: float, seed: int):
    """One independently perturbed rig per eval scene."""
    base = default_rig(cfg.scene)
    rng = np.random.default_rng([seed, int(round(sigma_rot_deg * 1000)), int(round(sigma_trans_m * 1000))])
    return [perturb_extrinsics(base, sigma_rot_deg, sigma_trans_m, rng) for _ in range(n)]


def experiment_noise(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, out_dir: str | Path | None = None,
                     levels: Sequence[float] = NOISE_LEVELS_DEG, sigma_trans_m: float = 0.0,
                     train_data: Batchable | None = None, eval_data: Batchable | None = None,
                     models: dict[str, list[torch.nn.Module]] | None = None) -> ExperimentResult:
    """Evaluate CFT and the projection baseline while the extrinsics drift away from calibration.

    Images are always rendered with the true rig. The baseline projects
    through the perturbed rig it is handed; CFT is never handed one.
    """
    start = time.perf_counter()
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_data, eval_data = _data(cfg, train_data, eval_data)
    if models is None:
        models = {kind: [fit(cfg, kind, s, train_data, out) for s in seeds] for kind in ("baseline", "cft")}
    rows = []
    scores: dict[tuple[str, float], list[float]] = {}
    identical = True
    for kind, trained in models.items():
        for seed, model in zip(seeds, trained):
            reference = None
            for sigma in levels:
                rigs = noisy_rigs(cfg, len(eval_data), sigma, sigma_trans_m if sigma > 0 else 0.0, seed)
                if kind == "cft":
                    with torch.no_grad():
                        F_B = model(eval_data.images[:4]).F_B
                    if reference is None:
                        reference = F_B
                    identical &= bool(torch.equal(F_B, reference))
                report = evaluate(model, eval_data, cfg, rigs=rigs)
                rows.append({"model": kind, "seed": seed, "sigma_rot_deg": sigma, "sigma_trans_m":
                             sigma_trans_m if sigma > 0 else 0.0, **_report_row(report)})
                scores.setdefault((kind, sigma), []).append(report.NDS)
    summary = {f"{k}@{s}": dict(zip(("mean", "std"), mean_std(v))) for (k, s), v in scores.items()}
    summary["cft_bit_identical"] = identical
    cft_rows = [r for r in rows if r["model"] == "cft"]
    if cft_rows:
        summary["cft_scores_identical"] = all(
            len({tuple(r[k] for k in ("NDS", "mAP", "mATE")) for r in cft_rows if r["seed"] == s}) == 1
            for s in {r["seed"] for r in cft_rows})
    top = max(levels)
    if ("baseline", 0.0) in scores and ("baseline", top) in scores:
        clean, noisy = scores[("baseline", 0.0)], scores[("baseline", top)]
        summary["baseline_drop_each_seed"] = [c - n for c, n in zip(clean, noisy)]
        summary["baseline_degrades_every_seed"] = all(n < c for c, n in zip(clean, noisy))
    result = ExperimentResult("exp_noise", rows, summary, cfg.to_dict(), time.perf_counter() - start)
    if out is not None:
        result.write(out)
    return result
