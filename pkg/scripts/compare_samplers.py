"""Compare ADS against the 3x oversample-and-discard baseline on mixed-difficulty prompts.

    python3 scripts/compare_samplers.py --steps 40 --seeds 7 8 9
"""

import argparse
import json

from rapo.sim import TrainConfig, compare_samplers

MIXED = ["trivial", "easy", "medium", "hard"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--difficulty", nargs="+", default=MIXED)
    args = ap.parse_args()

    for seed in args.seeds:
        cfg = TrainConfig.from_dict({"seed": seed, "steps": args.steps,
                                     "env": {"difficulty": args.difficulty}})
        report = compare_samplers(cfg)
        ads = report["ads"]["rollouts_per_trained_group"]
        base = report["oversample"]["rollouts_per_trained_group"]
        saving = None if ads is None or base is None else 1 - ads / base
        print(json.dumps({"seed": seed, "rollout_saving": saving, **report}))


if __name__ == "__main__":
    main()
