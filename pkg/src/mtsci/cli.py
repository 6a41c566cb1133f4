"""Command-line pipeline: simulate missing patterns, train, impute, evaluate.

Exit codes: 0 success, 1 usage/config/data problems, 2 training or sampling
divergence, 3 checkpoint/config mismatch, 4 evaluation join failure. The
MTSCI_SEED environment variable overrides every configured or flagged seed so
CI can pin runs externally.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from .config import (
    ABLATIONS,
    RunConfig,
    default_config,
    load_config,
    resolve_seed,
    save_effective_config,
    split_sim_seed,
)
from .dataset import (
    MissingSpec,
    SeriesTable,
    SplitSpec,
    apply_mask_sidecar,
    conceal_eval_targets,
    fit_normalizer,
    load_series,
    make_windows,
    pair_with_context,
    read_mask_sidecar,
    sidecar_name,
    simulate_missing,
    split_series,
    write_mask_sidecar,
)
from .denoiser import Denoiser, DenoiserConfig, instantiate_checkpoint, load_checkpoint, save_checkpoint
from .diffusion import build_schedule
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DivergenceError,
    JoinError,
    MtsciError,
    ParseError,
    ValidationError,
)
from .masking import MaskStrategy
from .metrics import crps_from_quantiles, crps_quantile, point_scores
from .sampler import impute_dataset
from .training import TrainConfig, train

log = logging.getLogger("mtsci")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_CHECKPOINT = 3
EXIT_JOIN = 4

SPLIT_ORDER = ("train", "val", "test")
CSV_QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
IMPUTATION_HEADER = [
    "window_start", "t", "feature", "observed_flag", "target_flag",
    "truth_if_known", "point_estimate", "q05", "q25", "q50", "q75", "q95",
]
REPORT_HEADER = [
    "dataset", "pattern", "seed", "variant",
    "mae", "rmse", "mape", "crps", "n_cells", "n_mape_excluded", "n_unscored",
]


def _setup_logging():
    # no timestamps: logs must be byte-identical across same-seed runs
    logging.basicConfig(stream=sys.stdout, level=logging.INFO,
                        format="%(levelname)s %(message)s", force=True)


def _apply_threads(args):
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
    elif getattr(args, "workers", None):
        torch.set_num_threads(max(1, args.workers))


def _load_run_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if args.config is None:
        cfg_data_free = default_config()
        if overrides:
            from .config import apply_overrides, config_from_dict

            return config_from_dict(apply_overrides(cfg_data_free.to_dict(), overrides))
        return cfg_data_free
    return load_config(args.config, overrides)


def _split_tables(cfg: RunConfig) -> dict[str, SeriesTable]:
    if not cfg.dataset.path:
        raise ConfigError("dataset.path is not set")
    series = load_series(cfg.dataset.path)
    if cfg.dataset.date_ranges:
        ranges = {k: tuple(v) for k, v in cfg.dataset.date_ranges.items()}
        spec = SplitSpec(fractions=None, date_ranges=ranges)
    else:
        spec = SplitSpec(fractions=tuple(cfg.dataset.split_fractions))
    train_s, val_s, test_s = split_series(series, spec)
    return {"train": train_s, "val": val_s, "test": test_s}


def _missing_spec(cfg: RunConfig) -> MissingSpec:
    m = cfg.mask
    return MissingSpec(
        pattern=m.pattern,
        point_ratio=m.point_ratio,
        block_point_ratio=m.block_point_ratio,
        block_start_prob=m.block_start_prob,
        block_len_min=m.block_len_min,
        block_len_max=m.block_len_max,
    )


def _train_strategy(cfg: RunConfig) -> MaskStrategy:
    # self-supervised target ratios are drawn per window: the full admissible
    # range for point masks, the capped start-probability range for blocks
    return MaskStrategy(kind=cfg.mask.pattern)


def _echo_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_effective_config(cfg, out_dir / f"effective-config.{command}.yaml")


# ----------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    if args.pattern:
        cfg = _override_mask_pattern(cfg, args.pattern)
    master_seed = resolve_seed(args.seed if args.seed is not None else cfg.mask.seed)
    out_dir = Path(args.out or cfg.output.dir)
    tables = _split_tables(cfg)
    spec = _missing_spec(cfg)

    planned = []
    for split in args.splits:
        path = out_dir / sidecar_name(split, cfg.mask.pattern, master_seed)
        if path.exists() and not args.force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        planned.append((split, path))

    _echo_config(cfg, out_dir, "simulate")
    for split, path in planned:
        windows = make_windows(tables[split], cfg.dataset.window_length, cfg.dataset.stride)
        masked = simulate_missing(windows, spec, split_sim_seed(master_seed, split))
        write_mask_sidecar(masked, path)
        n_obs = sum(int(w.obs_mask.sum()) for w in masked)
        n_hidden = sum(int(w.eval_mask.sum()) for w in masked)
        frac = n_hidden / n_obs if n_obs else 0.0
        log.info("%s: %d windows, hid %d/%d observed cells (%.3f) -> %s",
                 split, len(masked), n_hidden, n_obs, frac, path)
    return EXIT_OK


def _override_mask_pattern(cfg: RunConfig, pattern: str) -> RunConfig:
    from dataclasses import replace

    return replace(cfg, mask=replace(cfg.mask, pattern=pattern)).validate()


# -------------------------------------------------------------------- train

def _ablation_flags(name: str) -> tuple[bool, bool]:
    if name not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}, got {name!r}")
    intra_on = name not in ("wo_intra", "wo_cons")
    inter_on = name not in ("wo_inter", "wo_cons")
    return intra_on, inter_on


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    seed = resolve_seed(args.seed if args.seed is not None else cfg.train.seed)
    epochs = args.epochs if args.epochs is not None else cfg.train.epochs
    intra_on, inter_on = cfg.train.intra_on, cfg.train.inter_on
    if args.ablation != "none":
        intra_on, inter_on = _ablation_flags(args.ablation)
    _apply_threads(args)
    torch.manual_seed(seed)

    out_dir = Path(args.out or cfg.output.dir)
    tables = _split_tables(cfg)
    norm = fit_normalizer(tables["train"])
    L = cfg.dataset.window_length
    stride = cfg.dataset.stride
    train_windows = make_windows(norm.apply(tables["train"]), L, stride)
    val_windows = make_windows(norm.apply(tables["val"]), L, stride)
    if not train_windows:
        raise ValidationError("training split yields no windows")

    num_features = tables["train"].num_features
    model_cfg = DenoiserConfig(
        d=cfg.model.d, num_layers=cfg.model.num_layers, num_heads=cfg.model.num_heads,
        tau=cfg.train.tau, dropout=cfg.model.dropout, ff_dim=cfg.model.ff_dim,
        cond_fusion=cfg.model.cond_fusion, contrastive_pool=cfg.model.contrastive_pool,
    )
    model = Denoiser(model_cfg, L, num_features)
    diffusion_params = cfg.diffusion.params()
    schedule = build_schedule(
        K=cfg.diffusion.num_steps, beta_1=cfg.diffusion.beta_1,
        beta_K=cfg.diffusion.beta_K, shape=cfg.diffusion.shape,
    )

    _echo_config(cfg, out_dir, "train")
    (out_dir / "run_meta.json").write_text(json.dumps({
        "dataset": cfg.dataset.path, "pattern": cfg.mask.pattern,
        "seed": seed, "variant": args.ablation if args.ablation != "none" else "mtsci",
    }, indent=2, sort_keys=True) + "\n")

    if epochs == 0:
        warnings.warn("epochs=0: saving a checkpoint of initialized parameters")
        for name in ("best.pt", "last.pt"):
            save_checkpoint(out_dir / name, model, diffusion_params, norm,
                            meta={"epoch": -1, "history": []})
        log.info("wrote untrained checkpoint to %s", out_dir)
        return EXIT_OK

    start_epoch = 0
    optimizer_state = None
    prior_history = None
    if args.resume:
        payload = load_checkpoint(out_dir / "last.pt")
        model, norm = instantiate_checkpoint(payload, expect_shape=(L, num_features))
        model.train()
        optimizer_state = payload.get("optimizer_state")
        start_epoch = int(payload["meta"].get("epoch", -1)) + 1
        prior_history = payload["meta"].get("history")
        diffusion_params = payload["diffusion"]
        schedule = build_schedule(
            K=diffusion_params["num_steps"], beta_1=diffusion_params["beta_1"],
            beta_K=diffusion_params["beta_K"], shape=diffusion_params["shape"],
        )
        log.info("resuming from epoch %d", start_epoch)

    train_cfg = TrainConfig(
        epochs=epochs, batch_size=cfg.train.batch_size, lr=cfg.train.lr, seed=seed,
        lambda_cl=cfg.train.lambda_cl, intra_on=intra_on, inter_on=inter_on,
        both_views=cfg.train.both_views, objective=cfg.train.objective,
        reduction=cfg.train.reduction, grad_clip=cfg.train.grad_clip,
        patience=cfg.train.patience,
    )
    result = train(
        model, schedule,
        pair_with_context(train_windows), pair_with_context(val_windows),
        _train_strategy(cfg), train_cfg, out_dir, norm, diffusion_params,
        start_epoch=start_epoch, optimizer_state=optimizer_state,
        prior_history=prior_history,
    )
    log.info("best val loss %.6f at epoch %d; checkpoints in %s",
             result.best_val, result.best_epoch, out_dir)
    return EXIT_OK


# ------------------------------------------------------------------- impute

def cmd_impute(args) -> int:
    cfg = _load_run_config(args)
    seed = resolve_seed(args.seed if args.seed is not None else cfg.infer.seed)
    num_samples = args.samples if args.samples is not None else cfg.infer.num_samples
    _apply_threads(args)
    torch.manual_seed(seed)

    out_dir = Path(args.out or cfg.output.dir)
    checkpoint_path = Path(args.checkpoint or out_dir / "best.pt")
    if not checkpoint_path.exists():
        raise CheckpointMismatchError(f"checkpoint not found: {checkpoint_path}")
    payload = load_checkpoint(checkpoint_path)

    tables = _split_tables(cfg)
    raw_split = tables[args.split]
    L = cfg.dataset.window_length
    stride = cfg.dataset.stride
    model, norm = instantiate_checkpoint(payload, expect_shape=(L, raw_split.num_features))
    model.eval()
    if list(norm.feature_names) and list(norm.feature_names) != list(raw_split.feature_names):
        raise CheckpointMismatchError(
            f"checkpoint features {norm.feature_names} != data features {raw_split.feature_names}"
        )
    dp = payload["diffusion"]
    schedule = build_schedule(K=dp["num_steps"], beta_1=dp["beta_1"],
                              beta_K=dp["beta_K"], shape=dp["shape"])

    raw_windows = make_windows(raw_split, L, stride)
    norm_windows = make_windows(norm.apply(raw_split), L, stride)
    sidecar = args.sidecar
    if sidecar is None:
        candidate = out_dir / sidecar_name(args.split, cfg.mask.pattern, resolve_seed(cfg.mask.seed))
        sidecar = candidate if candidate.exists() else None
        if sidecar is None:
            log.info("no mask sidecar found; imputing native gaps only")
    if sidecar is not None:
        cells = read_mask_sidecar(sidecar)
        norm_windows = apply_mask_sidecar(norm_windows, cells)
    raw_values = {w.start_index: w.values for w in raw_windows}
    eval_masks = {w.start_index: w.eval_mask for w in norm_windows}

    results = impute_dataset(
        [conceal_eval_targets(w) for w in norm_windows],
        model, schedule, norm, num_samples, seed,
        raw_values=raw_values, batch_windows=cfg.infer.batch_windows,
        objective=cfg.train.objective,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir, "impute")
    imputations_path = Path(args.output_csv or out_dir / "imputations.csv")
    samples_path = imputations_path.with_suffix(".samples.npy")

    feature_names = list(raw_split.feature_names)
    target_rows = []
    with open(imputations_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IMPUTATION_HEADER)
        for res in results:
            qs = res.quantiles(CSV_QUANTILES)  # (5, L, C)
            truth_grid = raw_values[res.start_index]
            truth_known = eval_masks[res.start_index]
            Lw, Cw = res.point.shape
            for t in range(Lw):
                for f in range(Cw):
                    observed = int(res.cond_mask[t, f])
                    targeted = int(res.target_mask[t, f])
                    if observed:
                        truth_str = repr(float(res.point[t, f]))
                    elif truth_known[t, f]:
                        truth_str = repr(float(truth_grid[t, f]))
                    else:
                        truth_str = ""
                    writer.writerow([
                        res.start_index, t, feature_names[f], observed, targeted,
                        truth_str,
                        repr(float(res.point[t, f])),
                        *(repr(float(qs[q, t, f])) for q in range(len(CSV_QUANTILES))),
                    ])
                    if targeted:
                        target_rows.append(res.samples[:, t, f])

    sample_matrix = (np.stack(target_rows).astype(np.float32)
                     if target_rows else np.zeros((0, num_samples), dtype=np.float32))
    np.save(samples_path, sample_matrix)

    meta = {
        "dataset": cfg.dataset.path, "pattern": cfg.mask.pattern,
        "seed": seed, "split": args.split, "num_samples": num_samples,
        "checkpoint": str(checkpoint_path),
        "variant": payload["meta"].get("variant", _read_variant(out_dir)),
        "n_windows": len(results), "n_target_cells": len(target_rows),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("imputed %d windows (%d target cells) -> %s",
             len(results), len(target_rows), imputations_path)
    return EXIT_OK


def _read_variant(out_dir: Path) -> str:
    meta_path = out_dir / "run_meta.json"
    if meta_path.exists():
        try:
            return json.loads(meta_path.read_text()).get("variant", "mtsci")
        except (OSError, json.JSONDecodeError):
            return "mtsci"
    return "mtsci"


# ----------------------------------------------------------------- evaluate

def _load_truth_table(path: Path) -> dict[tuple[int, int, str], float]:
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"window_start", "t", "feature", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ParseError(f"truth table {path} must have columns {sorted(required)}")
        for row in reader:
            key = (int(row["window_start"]), int(row["t"]), row["feature"])
            table[key] = float(row["value"])
    return table


def cmd_evaluate(args) -> int:
    imputations_path = Path(args.imputations)
    if not imputations_path.exists():
        raise ConfigError(f"imputations file not found: {imputations_path}")
    truth_table = _load_truth_table(Path(args.truth)) if args.truth else None

    keys = []
    truths = []
    points = []
    quants = []
    n_target = 0
    n_unscored = 0
    with open(imputations_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = set(IMPUTATION_HEADER) - set(reader.fieldnames or ())
        if missing_cols:
            raise ParseError(
                f"{imputations_path} lacks columns {sorted(missing_cols)}"
            )
        for row in reader:
            if row["target_flag"] != "1":
                continue
            key = (int(row["window_start"]), int(row["t"]), row["feature"])
            n_target += 1
            if truth_table is not None:
                if key not in truth_table:
                    raise JoinError(
                        "truth table is missing key "
                        f"(window_start={key[0]}, t={key[1]}, feature={key[2]})"
                    )
                truth = truth_table[key]
            elif row["truth_if_known"] != "":
                truth = float(row["truth_if_known"])
            else:
                n_unscored += 1
                continue
            keys.append(key)
            truths.append(truth)
            points.append(float(row["point_estimate"]))
            quants.append([float(row[c]) for c in ("q05", "q25", "q50", "q75", "q95")])

    if not truths:
        raise JoinError(
            "no imputed cells with known truth to score "
            f"({n_target} target cells, {n_unscored} without truth)"
        )

    truth_vec = np.array(truths)
    point_vec = np.array(points)
    ones = np.ones_like(truth_vec, dtype=np.uint8)
    mae, rmse, mape = point_scores(truth_vec, point_vec, ones, mape_floor=args.mape_floor)
    n_excluded = int((np.abs(truth_vec) <= args.mape_floor).sum())

    samples_path = Path(args.samples) if args.samples else imputations_path.with_suffix(".samples.npy")
    if samples_path.exists():
        sample_matrix = np.load(samples_path)
        if sample_matrix.shape[0] != n_target:
            raise JoinError(
                f"samples file {samples_path} has {sample_matrix.shape[0]} rows, "
                f"imputations have {n_target} target cells"
            )
        if n_unscored or truth_table is not None:
            # align sample rows with the scored subset by re-walking the file
            scored_rows = _scored_row_indices(imputations_path, truth_table)
            sample_matrix = sample_matrix[scored_rows]
        crps = (crps_quantile(truth_vec, sample_matrix.T.astype(np.float64), ones)
                if sample_matrix.shape[1] >= 2 else float("nan"))
    else:
        crps = crps_from_quantiles(truth_vec, np.array(quants).T, CSV_QUANTILES)

    meta = _sibling_meta(imputations_path)
    identity = {
        "dataset": args.dataset or meta.get("dataset", ""),
        "pattern": args.pattern or meta.get("pattern", ""),
        "seed": args.seed if args.seed is not None else meta.get("seed", ""),
        "variant": args.variant or meta.get("variant", "mtsci"),
    }
    report = dict(identity)
    report.update({
        "mae": mae, "rmse": rmse,
        "mape": None if np.isnan(mape) else mape,
        "crps": None if np.isnan(crps) else crps,
        "n_cells": int(truth_vec.size),
        "n_mape_excluded": n_excluded,
        "n_unscored": n_unscored,
    })

    report_dir = Path(args.report_dir or imputations_path.parent)
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(report_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        writer.writerow([
            report["dataset"], report["pattern"], report["seed"], report["variant"],
            report["mae"], report["rmse"],
            "" if report["mape"] is None else report["mape"],
            "" if report["crps"] is None else report["crps"],
            report["n_cells"], report["n_mape_excluded"], report["n_unscored"],
        ])
    log.info("scored %d cells: mae %.6f rmse %.6f mape %s crps %s -> %s",
             report["n_cells"], mae, rmse,
             "n/a" if report["mape"] is None else f"{report['mape']:.4f}",
             "n/a" if report["crps"] is None else f"{report['crps']:.6f}",
             report_dir / "report.json")
    return EXIT_OK


def _scored_row_indices(imputations_path: Path, truth_table) -> np.ndarray:
    indices = []
    position = 0
    with open(imputations_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["target_flag"] != "1":
                continue
            key = (int(row["window_start"]), int(row["t"]), row["feature"])
            has_truth = (key in truth_table) if truth_table is not None \
                else row["truth_if_known"] != ""
            if has_truth:
                indices.append(position)
            position += 1
    return np.asarray(indices, dtype=int)


def _sibling_meta(imputations_path: Path) -> dict:
    meta_path = imputations_path.parent / "run_meta.json"
    if meta_path.exists():
        try:
            return json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError):
            return {}
    return {}


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtsci",
        description="Diffusion-based multivariate time-series imputation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.lr=0.001")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: config output.dir)")

    p_sim = sub.add_parser("simulate", help="freeze evaluation missing-masks to sidecar files")
    add_common(p_sim)
    p_sim.add_argument("--pattern", choices=("point", "block"), default=None)
    p_sim.add_argument("--splits", nargs="+", choices=SPLIT_ORDER, default=["test"])
    p_sim.add_argument("--force", action="store_true", help="overwrite existing sidecars")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="fit the denoiser")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p_train.add_argument("--ablation", choices=ABLATIONS, default="none")
    p_train.add_argument("--resume", action="store_true", help="continue from last.pt in the output dir")
    p_train.add_argument("--deterministic", action="store_true",
                         help="single-threaded numerics for reproducible runs")
    p_train.add_argument("--workers", type=int, default=None, help="torch intra-op threads")
    p_train.set_defaults(func=cmd_train)

    p_imp = sub.add_parser("impute", help="sample imputations for a split")
    add_common(p_imp)
    p_imp.add_argument("--checkpoint", default=None, help="model checkpoint (default: <out>/best.pt)")
    p_imp.add_argument("--split", choices=SPLIT_ORDER, default="test")
    p_imp.add_argument("--sidecar", default=None, help="frozen eval-mask sidecar to apply")
    p_imp.add_argument("--samples", type=int, default=None, help="override infer.num_samples")
    p_imp.add_argument("--output-csv", dest="output_csv", default=None)
    p_imp.add_argument("--deterministic", action="store_true")
    p_imp.add_argument("--workers", type=int, default=None)
    p_imp.set_defaults(func=cmd_impute)

    p_eval = sub.add_parser("evaluate", help="score an imputation CSV")
    p_eval.add_argument("--imputations", required=True)
    p_eval.add_argument("--samples", default=None,
                        help="samples sidecar (default: <imputations>.samples.npy)")
    p_eval.add_argument("--truth", default=None,
                        help="optional truth table CSV (window_start,t,feature,value)")
    p_eval.add_argument("--report-dir", dest="report_dir", default=None)
    p_eval.add_argument("--mape-floor", dest="mape_floor", type=float, default=1e-4)
    p_eval.add_argument("--dataset", default=None)
    p_eval.add_argument("--pattern", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--variant", default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ParseError, ValidationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except CheckpointMismatchError as exc:
        log.error("checkpoint mismatch: %s", exc)
        return EXIT_CHECKPOINT
    except JoinError as exc:
        log.error("join failure: %s", exc)
        return EXIT_JOIN
    except MtsciError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
