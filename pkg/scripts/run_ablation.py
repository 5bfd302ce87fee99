#!/usr/bin/env python3
"""Ablation table on the standard synthetic task, one dataset draw per seed.

Each seed draws its own task and shares initial weights across arms.
Prints mean and std per arm and optionally writes a CSV.
"""
import argparse
import csv
import sys

import numpy as np

from pdalign.trainer import ARMS, desk_config, standard_task, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--arms", default=",".join(ARMS + ("source_only",)))
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--csv")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    arms = args.arms.split(",")

    acc = {a: [] for a in arms}
    for s in seeds:
        data = standard_task(s)
        for a in arms:
            _, reports = train(desk_config(seed=s, epochs=args.epochs).for_arm(a), data)
            acc[a].append(reports[-1].accuracy)
            print(f"seed {s} {a:>15}: {reports[-1].accuracy:.4f}", flush=True)

    print()
    for a in arms:
        print(f"{a:>15}: mean={np.mean(acc[a]):.4f} std={np.std(acc[a]):.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "mean", "std"] + [f"seed_{s}" for s in seeds])
            for a in arms:
                w.writerow([a, np.mean(acc[a]), np.std(acc[a])] + acc[a])
    return 0


if __name__ == "__main__":
    sys.exit(main())
