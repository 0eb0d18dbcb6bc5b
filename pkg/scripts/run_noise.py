"""CFT vs the projection baseline under growing extrinsics noise."""

from _common import parse, show
from cft.experiments import NOISE_LEVELS_DEG, experiment_noise


def extra(p):
    p.add_argument("--levels", type=float, nargs="+", default=list(NOISE_LEVELS_DEG))
    p.add_argument("--sigma-trans", type=float, default=0.0, help="translation jitter in meters")


if __name__ == "__main__":
    args, cfg = parse(__doc__, extra)
    show(experiment_noise(cfg, args.seeds, args.out_dir, levels=args.levels, sigma_trans_m=args.sigma_trans))
