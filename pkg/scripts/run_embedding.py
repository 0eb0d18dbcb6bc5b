"""Implicit vs explicit vs enhanced-implicit position embedding, several seeds each."""

from _common import parse, show
from cft.experiments import experiment_embedding

if __name__ == "__main__":
    args, cfg = parse(__doc__)
    show(experiment_embedding(cfg, args.seeds, args.out_dir))
