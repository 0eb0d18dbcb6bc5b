"""Score and cross-attention cost for each window scheme."""

from _common import parse, show
from cft.experiments import experiment_windows
from cft.va import SchemeKind

if __name__ == "__main__":
    args, cfg = parse(__doc__, lambda p: p.add_argument("--schemes", nargs="+", default=[k.value for k in SchemeKind]))
    show(experiment_windows(cfg, args.seeds, args.out_dir, schemes=args.schemes))
