"""Finite-difference check of the analytic gradient for both clipping variants.

    python3 scripts/check_grad.py --seeds 0 1 2 --trials 100
"""

import argparse

import numpy as np

from rapo.gradcheck import check_gradients
from rapo.policy_opt import ClipConfig, GateConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--rho", type=float, default=0.2)
    args = ap.parse_args()

    for optimized in (True, False):
        clip = ClipConfig(optimized=optimized)
        for seed in args.seeds:
            errs = np.array(check_gradients(seed, args.trials, clip, GateConfig(args.rho)))
            name = "optimized" if optimized else "vanilla"
            print(f"{name:9s} seed {seed}: max {errs.max():.2e}  median {np.median(errs):.2e}")


if __name__ == "__main__":
    main()
