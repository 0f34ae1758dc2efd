"""Gradient-mapping norm of SPGDA on two Gaussians: window at iteration 500 vs the final window.

    python scripts/stationarity.py [--csv trace.csv]
"""
import argparse

from wdro.experiments import StationarityConfig, stationarity_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", help="write the metric records here")
    args = ap.parse_args()
    cfg = StationarityConfig()
    r = stationarity_trend(cfg)
    print(f"window ending at {cfg.early}: {r.early:.5f}")
    print(f"window ending at {cfg.iterations}: {r.final:.5f}")
    print(f"ratio {r.ratio:.3f}")
    if args.csv:
        r.metrics.to_csv(args.csv)


if __name__ == "__main__":
    main()
