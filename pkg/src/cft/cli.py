"""Command-line entry point: ``cft <subcommand> [--config cfg.json] [--seed N] [--out-dir DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import costmodel
from .config import RunConfig
from .pa import PaDesign
from .experiments import DEFAULT_SEEDS, NOISE_LEVELS_DEG, experiment_embedding, experiment_noise, \
    experiment_windows, noisy_rigs, write_csv
from .scenegen import generate_dataset, read_dataset, write_dataset
from .train import Batchable, build_model, evaluate, load_model, make_data, save_model, train
from .va import SchemeKind, attention_maps

log = logging.getLogger("cft")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "data_seed", None) is not None:
        changes["data_seed"] = args.data_seed
    for name in ("design", "scheme"):
        if getattr(args, name, None):
            changes[name] = getattr(args, name)
    if getattr(args, "epochs", None) is not None:
        changes["train"] = cfg.train.__class__(**{**cfg.train.__dict__, "epochs": args.epochs})
    return cfg.with_(**changes) if changes else cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _split(cfg: RunConfig, data_dir: str | None, split: str) -> Batchable:
    if data_dir:
        samples, _, _ = read_dataset(Path(data_dir) / f"{split}.bin")
        return Batchable.build(samples, cfg)
    return make_data(cfg, split)


def cmd_gen_data(args) -> None:
    cfg, out = _config(args), _out(args)
    for split, seeds in (("train", cfg.train_seeds()), ("eval", cfg.eval_seeds())):
        write_dataset(out / f"{split}.bin", generate_dataset(seeds, cfg.scene, cfg.bev), cfg.scene, cfg.bev)
    (out / "config.json").write_text(cfg.to_json())
    print(f"wrote {cfg.train.n_train} train and {cfg.train.n_eval} eval scenes to {out}")


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    model = build_model(cfg, args.kind)
    result = train(model, _split(cfg, args.data_dir, "train"), cfg, curve_path=out / "loss.csv")
    save_model(out / "model.json", model, cfg, args.kind)
    (out / "config.json").write_text(cfg.to_json())
    _write_json(out / "train.json", {"seconds": result.seconds, "curve": result.curve})
    print(f"trained {args.kind} in {result.seconds:.1f}s; final loss {result.curve[-1]['total']:.4f}")


def cmd_eval(args) -> None:
    out = _out(args)
    model, cfg, kind = load_model(args.checkpoint)
    data = _split(cfg, args.data_dir, "eval")
    rigs = noisy_rigs(cfg, len(data), args.sigma_rot, args.sigma_trans, cfg.seed) if kind == "baseline" else None
    report = evaluate(model, data, cfg, rigs=rigs, detections_path=out / "detections.json")
    (out / "metrics.json").write_text(report.to_json())
    row = {k: v for k, v in json.loads(report.to_json()).items() if k != "per_class"}
    write_csv(out / "metrics.csv", [row])
    print(report.table())


def cmd_cost(args) -> None:
    cfg, out = _config(args), _out(args)
    kinds = list(SchemeKind)
    rows = costmodel.cost_table(kinds, 1, 1, 64, 64, 1)
    costmodel.write_rows(rows, out, "cost_coefficients")
    images = make_data(cfg.with_(train=cfg.train.__class__(n_train=0, n_eval=1)), "eval").images
    measured = []
    for kind in kinds:
        model = build_model(cfg.with_(scheme=kind), "cft")
        measured.append(costmodel.measured_cost(model, images).to_dict())
    costmodel.write_rows(measured, out, "cost_measured")
    for r, m in zip(rows, measured):
        print(f"{r['kind']:>9} coeff {r['coefficient']:>6}  ratio {r['ratio_vs_global']:.4f}  "
              f"measured/analytic {m['measured_muladds'] / m['analytic_muladds']:.4f}  "
              f"padding {m['padding_overhead']:.4f}")


def _seeds(args) -> tuple[int, ...]:
    return tuple(args.seeds) if args.seeds else DEFAULT_SEEDS


def cmd_exp_embedding(args) -> None:
    res = experiment_embedding(_config(args), _seeds(args), _out(args))
    print(json.dumps(res.summary, indent=1))


def cmd_exp_windows(args) -> None:
    res = experiment_windows(_config(args), _seeds(args), _out(args))
    print(json.dumps(res.summary, indent=1))


def cmd_exp_noise(args) -> None:
    res = experiment_noise(_config(args), _seeds(args), _out(args), levels=args.levels or NOISE_LEVELS_DEG,
                           sigma_trans_m=args.sigma_trans)
    print(json.dumps(res.summary, indent=1))


def cmd_dump_attn(args) -> None:
    out = _out(args)
    model, cfg, kind = load_model(args.checkpoint)
    if kind != "cft":
        raise SystemExit("dump-attn needs a CFT checkpoint")
    data = _split(cfg, args.data_dir, "eval")
    with torch.no_grad():
        model(data.images[args.scene : args.scene + 1], keep_attention=True)
    H_s, W_s = cfg.feature_hw
    layer = model.transformer.cross_blocks[args.layer]
    maps = attention_maps(layer.last_attention[0], model.scheme, H_s, W_s)
    cells = [tuple(args.cell)] if args.cell else sorted(maps)
    doc = {"scene_seed": data.samples[args.scene].seed, "layer": args.layer, "scheme": cfg.scheme.value,
           "cells": {f"{h},{w}": {str(v): m.tolist() for v, m in maps[(h, w)].items()} for h, w in cells}}
    _write_json(out / "attention.json", doc)
    rows = [{"h": h, "w": w, "view": v, "mass": float(m.sum())} for h, w in cells for v, m in maps[(h, w)].items()]
    write_csv(out / "attention_mass.csv", rows)
    print(f"wrote attention maps for {len(cells)} cells to {out}")


def cmd_dump_embeddings(args) -> None:
    out = _out(args)
    model, cfg, kind = load_model(args.checkpoint)
    if kind != "cft":
        raise SystemExit("dump-embeddings needs a CFT checkpoint")
    with torch.no_grad():
        emb = model.pa()
    doc = {name: getattr(emb, name).tolist() for name in ("Q_p", "Q_c", "z_ref", "M", "Q_ep")
           if getattr(emb, name) is not None}
    _write_json(out / "embeddings.json", doc)
    if emb.z_ref is not None:
        z = emb.z_ref[..., 0].numpy()
        write_csv(out / "z_ref.csv", [{"h": h, "w": w, "z_ref": float(z[h, w])}
                                      for h in range(z.shape[0]) for w in range(z.shape[1])])
    print(f"wrote {', '.join(doc)} to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cft", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="RunConfig JSON; defaults to the desk configuration")
        sp.add_argument("--seed", type=int, help="model seed override")
        sp.add_argument("--out-dir", default="runs", help="where artifacts are written")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "render train/eval scenes to disk")
    sp.add_argument("--data-seed", type=int)
    sp = add("train", cmd_train, "train CFT or the projection baseline")
    sp.add_argument("--kind", choices=("cft", "baseline"), default="cft")
    sp.add_argument("--data-dir")
    sp.add_argument("--design", choices=[d.value for d in PaDesign])
    sp.add_argument("--scheme", choices=[k.value for k in SchemeKind])
    sp.add_argument("--epochs", type=int)
    sp = add("eval", cmd_eval, "score a checkpoint on the eval split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data-dir")
    sp.add_argument("--sigma-rot", type=float, default=0.0, help="extrinsics rotation noise (deg), baseline only")
    sp.add_argument("--sigma-trans", type=float, default=0.0, help="extrinsics translation noise (m), baseline only")
    add("cost", cmd_cost, "analytic and instrumented cross-attention cost per scheme")
    for name, fn in (("exp-embedding", cmd_exp_embedding), ("exp-windows", cmd_exp_windows),
                     ("exp-noise", cmd_exp_noise)):
        sp = add(name, fn, f"run the {name[4:]} experiment")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--epochs", type=int)
        if name == "exp-noise":
            sp.add_argument("--levels", type=float, nargs="+", help="rotation sigmas in degrees")
            sp.add_argument("--sigma-trans", type=float, default=0.0)
    sp = add("dump-attn", cmd_dump_attn, "per-view attention maps of a trained model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data-dir")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--layer", type=int, default=-1)
    sp.add_argument("--cell", type=int, nargs=2, metavar=("H", "W"))
    sp = add("dump-embeddings", cmd_dump_embeddings, "BEV embeddings and reference heights of a trained model")
    sp.add_argument("--checkpoint", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
