"""Grid search over the five loss weights on one simulated corpus.

Each grid point trains SS-ABC(fixed) with debiasing and reports test
Recall@50. Values are given per weight as comma lists, e.g.

    python3 scripts/lambda_grid.py --l1 0.5,1 --l2 0.5,1 --l3 1 --l4 1 --l5 1 --epochs 5
"""

import argparse
import itertools
import json

from uma2.config import RunConfig
from uma2.pipeline import run_cell, simulate


def floats(text):
    return [float(x) for x in text.split(",")]


def main():
    ap = argparse.ArgumentParser()
    for k in range(1, 6):
        ap.add_argument(f"--l{k}", type=floats, default=[1.0])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--strategy", default="ss-abc-fixed")
    args = ap.parse_args()
    over = {"sim.seed": args.seed, "train.seed": args.seed}
    if args.epochs is not None:
        over["train.epochs"] = args.epochs
    cfg = RunConfig().replace(**over)
    data = simulate(cfg.sim)
    grid = itertools.product(args.l1, args.l2, args.l3, args.l4, args.l5)
    best = None
    for lam in grid:
        res, metrics = run_cell(data, cfg.replace(**{"train.lambdas": lam}), args.strategy, True, k_list=[50])
        r = metrics[0].recall
        print(json.dumps({"lambdas": lam, "recall@50": r, "best_epoch": res.best_epoch}), flush=True)
        if best is None or r > best[1]:
            best = (lam, r)
    print(f"best lambdas {best[0]} Recall@50 {best[1]:.4f}")


if __name__ == "__main__":
    main()
