#!/usr/bin/env python3
"""Condense the CSVs written by run_all_experiments.sh into a few
headline numbers (correlations and orderings that the experiments are
about).  Read-only; safe to run on partial results."""

import csv
import os
import sys
from collections import defaultdict

import numpy as np

OUT = sys.argv[1] if len(sys.argv) > 1 else "out"


def read(path):
    with open(path) as f:
        rows = [r for r in csv.DictReader(l for l in f if not l.startswith("#"))]
    return rows


def main():
    audit = os.path.join(OUT, "audit_lenet", "audit.csv")
    if os.path.exists(audit):
        rows = read(audit)
        lb = np.array([float(r["i2f_lower_bound"]) for r in rows])
        l2 = np.array([float(r["attack_l2"]) for r in rows])
        r = np.corrcoef(lb, l2)[0, 1] if len(rows) > 1 else float("nan")
        print(f"audit: {len(rows)} rows, corr(lower bound, attack L2) = {r:.3f}")

    eigen = os.path.join(OUT, "eigen_defense", "eigen_defense.csv")
    if os.path.exists(eigen):
        per = defaultdict(list)
        for r in read(eigen):
            per[r["sample"]].append((float(r["sigma"]), float(r["attack_mse"])))
        mono = sum(1 for v in per.values()
                   if [m for _, m in sorted(v, reverse=True)] == sorted(m for _, m in v))
        print(f"eigen-defense: {mono}/{len(per)} samples with MSE inverse to sigma")

    init = os.path.join(OUT, "init_compare", "init_compare.csv")
    if os.path.exists(init):
        per = defaultdict(list)
        for r in read(init):
            per[r["scheme"]].append(float(r["attack_mse"]))
        means = {k: np.mean(v) for k, v in per.items()}
        order = sorted(means, key=means.get)
        print("init-compare mean MSE ascending:",
              ", ".join(f"{k}={means[k]:.3f}" for k in order))

    fair = os.path.join(OUT, "fairness", "fairness_classes.csv")
    if os.path.exists(fair):
        means = [float(r["mean_mse"]) for r in read(fair)]
        print(f"fairness: class-mean MSE spread {min(means):.3f} .. {max(means):.3f} "
              f"(ratio {max(means) / min(means):.2f})")

    timings = os.path.join(OUT, "efficiency", "efficiency_timings.txt")
    if os.path.exists(timings):
        print("efficiency:", open(timings).read().strip().replace("\n", ", "))


if __name__ == "__main__":
    main()
