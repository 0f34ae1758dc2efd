"""DRFL vs FedAvg: PGD error per round on ten iid MNIST workers.

    python scripts/federated_comparison.py [--seed 0] [--csv curves.csv]
"""
import argparse
import csv
from dataclasses import replace

from wdro.experiments import FederatedConfig, federated_comparison, moving_average


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="write round,method,attacked_error rows here")
    args = ap.parse_args()
    r = federated_comparison(replace(FederatedConfig(), seed=args.seed), log=print)
    for algo, errs in r.attacked.items():
        sm = moving_average(errs[1:], 5)
        print(f"{algo:7s} smoothed PGD error, last 30 rounds: " + " ".join(f"{v:.3f}" for v in sm[-30:]))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "method", "attacked_error"])
            for algo, errs in r.attacked.items():
                w.writerows((i, algo, repr(float(e))) for i, e in enumerate(errs))


if __name__ == "__main__":
    main()
