#!/usr/bin/env python3
"""End-to-end synthetic benchmark driver.

Generates a mixture-of-sinusoids dataset, freezes an evaluation mask, trains
one or more model variants, imputes the test split, and prints a results
table together with the mean/interpolation baselines computed on exactly the
same hidden cells.

Example:
    python3 scripts/run_synthetic_e2e.py --out /tmp/bench --epochs 20
    python3 scripts/run_synthetic_e2e.py --out /tmp/bench-block --pattern block \
        --seeds 0 1 2 --variants mtsci wo_cons
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mtsci.cli import main as mtsci_main
from mtsci.dataset import (
    SplitSpec,
    apply_mask_sidecar,
    fit_normalizer,
    load_series,
    make_windows,
    read_mask_sidecar,
    sidecar_name,
    split_series,
)
from mtsci.metrics import linear_interp_baseline, mean_baseline, point_scores
from mtsci.synthetic import generate_values, write_series_csv


def sh(args):
    rc = mtsci_main(args)
    if rc != 0:
        sys.exit(f"mtsci {' '.join(args)} exited {rc}")


def build_parser():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, help="working directory")
    p.add_argument("--steps", type=int, default=48_000)
    p.add_argument("--features", type=int, default=5)
    p.add_argument("--periods", type=float, nargs="+", default=[8.0, 16.0, 24.0])
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--pattern", choices=("point", "block"), default="point")
    p.add_argument("--rate", type=float, default=0.2,
                   help="point-missing ratio (ignored for block)")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--variants", nargs="+", default=["mtsci", "wo_cons"],
                   choices=("mtsci", "wo_intra", "wo_inter", "wo_cons"))
    p.add_argument("--patience", type=int, default=None,
                   help="early-stop patience (default: run all epochs)")
    p.add_argument("--lam", type=float, default=None,
                   help="override train.lambda_cl")
    p.add_argument("--tau", type=float, default=None,
                   help="override train.tau")
    return p


def write_config(path, args, data_csv, out_dir):
    cfg = {
        "dataset": {"path": str(data_csv), "window_length": args.window},
        "mask": {"pattern": args.pattern, "point_ratio": args.rate,
                 "seed": args.mask_seed},
        "diffusion": {"num_steps": args.k},
        "model": {"d": args.d, "num_layers": args.layers},
        "train": {"epochs": args.epochs, "batch_size": args.batch,
                  "patience": args.patience},
    }
    if args.lam is not None:
        cfg["train"]["lambda_cl"] = args.lam
    if args.tau is not None:
        cfg["train"]["tau"] = args.tau
    cfg |= {
        "infer": {"num_samples": args.samples},
        "output": {"dir": str(out_dir)},
    }
    path.write_text(yaml.safe_dump(cfg))


def baseline_scores(data_csv, sidecar, window):
    """Mean and linear-interp MAE over the sidecar's hidden test cells."""
    series = load_series(data_csv)
    train_s, _, test_s = split_series(series, SplitSpec(fractions=(0.7, 0.1, 0.2)))
    means = fit_normalizer(train_s).mean
    windows = apply_mask_sidecar(
        make_windows(test_s, window), read_mask_sidecar(sidecar)
    )
    rows = {"mean": [], "interp": []}
    truths, evals = [], []
    for w in windows:
        cond = w.conditioning_mask
        vals = w.values * cond
        rows["mean"].append(mean_baseline(vals, cond, means))
        rows["interp"].append(linear_interp_baseline(vals, cond, fallback_means=means))
        truths.append(w.values)
        evals.append(w.eval_mask)
    truth = np.concatenate(truths)
    mask = np.concatenate(evals)
    out = {}
    for name, est in rows.items():
        mae, rmse, _ = point_scores(truth, np.concatenate(est), mask)
        out[name] = {"mae": mae, "rmse": rmse}
    return out


def main():
    args = build_parser().parse_args()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)

    data_csv = root / "data.csv"
    if not data_csv.exists():
        values = generate_values(args.steps, num_features=args.features,
                                 noise_std=args.noise, seed=args.data_seed,
                                 periods=tuple(args.periods))
        write_series_csv(data_csv, values)
        print(f"wrote {args.steps} x {args.features} series to {data_csv}")

    mask_dir = root / "masks"
    config = root / "config.yaml"
    write_config(config, args, data_csv, mask_dir)
    sidecar = mask_dir / sidecar_name("test", args.pattern, args.mask_seed)
    if not sidecar.exists():
        sh(["simulate", "--config", str(config), "--out", str(mask_dir)])

    reports = []
    for variant in args.variants:
        for seed in args.seeds:
            run_dir = root / f"{variant}-s{seed}"
            write_config(config, args, data_csv, run_dir)
            t0 = time.time()
            train_args = ["train", "--config", str(config), "--seed", str(seed),
                          "--deterministic"]
            if variant != "mtsci":
                train_args += ["--ablation", variant]
            sh(train_args)
            t1 = time.time()
            sh(["impute", "--config", str(config), "--seed", str(seed),
                "--sidecar", str(sidecar), "--deterministic"])
            t2 = time.time()
            sh(["evaluate", "--imputations", str(run_dir / "imputations.csv"),
                "--variant", variant, "--seed", str(seed)])
            report = json.loads((run_dir / "report.json").read_text())
            report["train_s"] = round(t1 - t0, 1)
            report["impute_s"] = round(t2 - t1, 1)
            reports.append(report)

    baselines = baseline_scores(data_csv, sidecar, args.window)
    print("\n=== results ===")
    print(f"{'variant':10s} {'seed':>4s} {'mae':>8s} {'rmse':>8s} {'crps':>8s} "
          f"{'train_s':>8s} {'impute_s':>9s}")
    for r in reports:
        crps = "n/a" if r["crps"] is None else f"{r['crps']:.4f}"
        print(f"{r['variant']:10s} {r['seed']:4d} {r['mae']:8.4f} {r['rmse']:8.4f} "
              f"{crps:>8s} {r['train_s']:8.1f} {r['impute_s']:9.1f}")
    for name, s in baselines.items():
        print(f"{name:10s} {'':4s} {s['mae']:8.4f} {s['rmse']:8.4f}")
    (root / "summary.json").write_text(json.dumps(
        {"runs": reports, "baselines": baselines}, indent=2, sort_keys=True) + "\n")
    print(f"\nsummary -> {root / 'summary.json'}")


if __name__ == "__main__":
    main()
