#!/usr/bin/env python3
"""Run all three numerical-lab experiments and print their verdicts.

Covers: the Pinsker inequality chain bounding the likelihood gap, the
total-variation ceiling on any detector's AUC, and the Monte-Carlo check
of the concentration bound behind the recovery-sample count.

Usage: python scripts/run_theory_lab.py [--seed 0] [--out report.json]
"""

import argparse
import json

from maskdetect.theory import (
    run_kbound_experiment,
    run_lecam_experiment,
    run_pinsker_experiment,
)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    reports = [
        run_pinsker_experiment(trials=1000, seed=args.seed),
        run_lecam_experiment(n_pairs=50, n_detectors=20, n_samples=10_000,
                             seed=args.seed),
        run_kbound_experiment(trials=1000, seed=args.seed),
    ]
    for report in reports:
        print(json.dumps(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=2)

    ok = (reports[0]["violations"] == 0 and reports[1]["violations"] == 0
          and reports[2]["failure_ratio"] <= reports[2]["bound"])
    print("theory lab:", "all clean" if ok else "VIOLATIONS FOUND")
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
