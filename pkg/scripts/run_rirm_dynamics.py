"""Train the tabular policy on the toy environment and summarize reflection dynamics.

    python3 scripts/run_rirm_dynamics.py --seed 7 --steps 500 --out runs/rirm.jsonl
"""

import argparse
import json
import sys

import numpy as np

from rapo.records import write_records
from rapo.sim import TrainConfig, run_training


def summarize(metrics):
    q = max(1, len(metrics) // 4)
    tail = metrics[-10:]
    return {
        "steps": len(metrics),
        "final_accuracy": float(np.mean([m["accuracy"] for m in tail])),
        "verify_first_quarter": float(np.mean([m["mean_verify_count"] for m in metrics[:q]])),
        "verify_last_quarter": float(np.mean([m["mean_verify_count"] for m in metrics[-q:]])),
        "tokens_correct_step0": metrics[0]["mean_tokens_correct"],
        "tokens_correct_final": float(np.mean([m["mean_tokens_correct"] for m in tail])),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON TrainConfig overrides")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out", help="write per-step metrics here")
    args = ap.parse_args()

    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    raw.update(seed=args.seed, steps=args.steps)
    cfg = TrainConfig.from_dict(raw)

    def progress(row):
        if row["step"] % 50 == 0:
            print(f"step {row['step']:4d}  acc {row['accuracy']:.3f}  "
                  f"verify {row['mean_verify_count']:.2f}  tokens {row['mean_tokens']:.2f}",
                  file=sys.stderr)

    result = run_training(cfg, on_step=progress)
    if args.out:
        write_records(args.out, result.metrics)
    if not result.metrics:
        print(json.dumps({"status": result.status, "steps": 0}))
        return
    print(json.dumps({"status": result.status, **summarize(result.metrics)}, indent=2))


if __name__ == "__main__":
    main()
