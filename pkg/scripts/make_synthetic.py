#!/usr/bin/env python3
"""Generate a synthetic multivariate series CSV for pipeline experiments."""
import argparse

from mtsci.synthetic import make_synthetic_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output CSV path")
    ap.add_argument("--steps", type=int, default=48_000)
    ap.add_argument("--features", type=int, default=5)
    ap.add_argument("--noise", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--missing", type=float, default=0.0,
                    help="fraction of cells blanked in the written file")
    args = ap.parse_args()
    path = make_synthetic_csv(
        args.out, num_steps=args.steps, num_features=args.features,
        noise_std=args.noise, seed=args.seed, missing_fraction=args.missing,
    )
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
