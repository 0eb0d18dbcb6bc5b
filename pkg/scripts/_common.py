"""Shared argument handling for the experiment scripts."""

import argparse
import json
import logging
from pathlib import Path

from cft.config import RunConfig
from cft.experiments import DEFAULT_SEEDS


def parse(description: str, extra=None):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="RunConfig JSON (default: desk configuration)")
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    p.add_argument("--out-dir", type=Path, required=True)
    if extra:
        extra(p)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return args, cfg


def show(result) -> None:
    print(json.dumps(result.summary, indent=1))
    print(f"{result.name}: {result.seconds / 60:.1f} min")
