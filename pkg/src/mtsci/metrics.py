"""Imputation scores (MAE, RMSE, MAPE, quantile-CRPS) and trivial baselines.

All scores are computed in denormalized (physical) units over evaluation
target cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MAPE_FLOOR = 1e-4
DEFAULT_QUANTILE_LEVELS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass
class ScoreReport:
    mae: float
    rmse: float
    mape: float          # x100; NaN when every truth is below the MAPE floor
    crps: float          # NaN when no samples were provided
    n_cells: int
    n_mape_excluded: int = 0

    def to_dict(self) -> dict:
        def _clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "mae": _clean(self.mae),
            "rmse": _clean(self.rmse),
            "mape": _clean(self.mape),
            "crps": _clean(self.crps),
            "n_cells": self.n_cells,
            "n_mape_excluded": self.n_mape_excluded,
        }


def point_scores(
    truth: np.ndarray,
    estimate: np.ndarray,
    target_mask: np.ndarray,
    mape_floor: float = MAPE_FLOOR,
) -> tuple[float, float, float]:
    """MAE, RMSE and MAPE (x100) over target cells.

    MAPE skips cells with |truth| <= mape_floor and is NaN when none remain.
    """
    sel = np.asarray(target_mask).astype(bool)
    if not sel.any():
        raise ValidationError("point_scores: empty target set")
    err = np.asarray(estimate)[sel] - np.asarray(truth)[sel]
    t = np.asarray(truth)[sel]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    ok = np.abs(t) > mape_floor
    mape = float(100.0 * (np.abs(err[ok]) / np.abs(t[ok])).mean()) if ok.any() else float("nan")
    return mae, rmse, mape


def crps_quantile(
    truth: np.ndarray,
    samples: np.ndarray,
    target_mask: np.ndarray,
    quantile_levels=None,
) -> float:
    """Quantile-loss CRPS normalized by mean |truth| over target cells.

    samples has shape (S, ...) with the trailing shape matching truth;
    the score averages 2 * pinball(q) over target cells and levels.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValidationError("crps_quantile needs at least 2 samples")
    sel = np.asarray(target_mask).astype(bool)
    if not sel.any():
        raise ValidationError("crps_quantile: empty target set")
    levels = np.asarray(quantile_levels if quantile_levels is not None else DEFAULT_QUANTILE_LEVELS)
    t = np.asarray(truth)[sel]
    s = samples[:, sel]  # (S, n)
    qhat = np.quantile(s, levels, axis=0)  # (Q, n)
    return crps_from_quantiles(t, qhat, levels)


def crps_from_quantiles(truth: np.ndarray, quantiles: np.ndarray, levels) -> float:
    """Same score when the per-cell quantile estimates are already known.

    quantiles has shape (Q, n) for n scored cells at the given levels.
    """
    t = np.asarray(truth, dtype=np.float64)
    qhat = np.asarray(quantiles, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64).reshape(-1, 1)
    pinball = 2.0 * np.abs((qhat - t) * ((t <= qhat).astype(np.float64) - levels))
    denom = max(np.abs(t).mean(), 1e-12)
    return float(pinball.mean() / denom)


def mean_baseline(
    values: np.ndarray,
    cond_mask: np.ndarray,
    feature_means: np.ndarray,
    global_mean: float | None = None,
) -> np.ndarray:
    """Fill every non-conditioning cell with the per-feature training mean."""
    cond = np.asarray(cond_mask).astype(bool)
    means = np.asarray(feature_means, dtype=np.float64).copy()
    bad = ~np.isfinite(means)
    if bad.any():
        if global_mean is None:
            global_mean = float(means[~bad].mean()) if (~bad).any() else 0.0
        means[bad] = global_mean
    est = np.broadcast_to(means, values.shape).copy()
    est[cond] = np.asarray(values)[cond]
    return est


def linear_interp_baseline(
    values: np.ndarray,
    cond_mask: np.ndarray,
    fallback_means: np.ndarray | None = None,
) -> np.ndarray:
    """Per-feature 1-D interpolation across time within the window.

    Edges clamp to the nearest observed value; a feature with no observed
    cell falls back to its entry in fallback_means (or 0).
    """
    vals = np.asarray(values, dtype=np.float64)
    cond = np.asarray(cond_mask).astype(bool)
    length, n_feat = vals.shape
    grid = np.arange(length)
    est = vals.copy()
    for f in range(n_feat):
        obs = np.flatnonzero(cond[:, f])
        if obs.size == 0:
            fill = 0.0 if fallback_means is None else float(fallback_means[f])
            est[:, f] = fill
            continue
        est[:, f] = np.interp(grid, obs, vals[obs, f])
        est[obs, f] = vals[obs, f]
    return est
