"""Probabilistic imputation by reverse diffusion.

Targets are every cell that is not usable as conditioning (native gaps plus
artificially hidden evaluation cells). Each window owns an RNG derived from
(master_seed, window start), so imputations do not depend on how windows are
grouped into forward batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import NormStats, Window
from .diffusion import DiffusionSchedule, reverse_step, reverse_step_x0
from .errors import DivergenceError, ValidationError

DEFAULT_NUM_SAMPLES = 100
_FORWARD_BATCH_TARGET = 64


@dataclass
class ImputationResult:
    """Denormalized imputation for one window.

    `samples` and `point` carry the observed values untouched at conditioning
    cells; drawn values appear only at target cells. Ground truth for hidden
    cells is deliberately not part of this type — inference never sees it.
    """

    start_index: int
    point: np.ndarray        # (L, C) median across samples
    samples: np.ndarray      # (S, L, C)
    target_mask: np.ndarray  # (L, C) uint8
    cond_mask: np.ndarray    # (L, C) uint8

    def quantiles(self, levels) -> np.ndarray:
        """Per-cell quantiles across samples, shape (len(levels), L, C)."""
        return np.quantile(self.samples, np.asarray(levels), axis=0)


def _window_rng(master_seed: int, start_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, start_index]))


def impute_dataset(
    windows: list[Window],
    model,
    schedule: DiffusionSchedule,
    norm: NormStats,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    master_seed: int = 0,
    raw_values: dict[int, np.ndarray] | None = None,
    batch_windows: int | None = None,
    objective: str = "predict_noise",
) -> list[ImputationResult]:
    """Impute every window; returns results in input order.

    raw_values optionally maps window start -> original (unnormalized) values
    so observed cells copy through bit-exactly; otherwise observed values are
    recovered by inverting the normalization.
    """
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")
    if not windows:
        return []
    if batch_windows is None:
        batch_windows = max(1, _FORWARD_BATCH_TARGET // num_samples)
    results = []
    for at in range(0, len(windows), batch_windows):
        group = windows[at:at + batch_windows]
        results.extend(
            _impute_group(group, model, schedule, norm, num_samples,
                          master_seed, raw_values, objective)
        )
    return results


def impute_window(
    window: Window,
    model,
    schedule: DiffusionSchedule,
    norm: NormStats,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    master_seed: int = 0,
    raw_values: np.ndarray | None = None,
    objective: str = "predict_noise",
) -> ImputationResult:
    mapping = None if raw_values is None else {window.start_index: raw_values}
    return impute_dataset(
        [window], model, schedule, norm, num_samples, master_seed,
        raw_values=mapping, objective=objective,
    )[0]


def _impute_group(group, model, schedule, norm, S, master_seed, raw_values, objective):
    L, C = group[0].values.shape
    G = len(group)
    step_fn = reverse_step if objective == "predict_noise" else reverse_step_x0

    cond_np = np.stack([w.conditioning_mask for w in group]).astype(np.float32)
    vals_np = np.stack([w.values for w in group]).astype(np.float32)
    target_np = 1.0 - cond_np

    # expand each window to its S sample slots: batch layout (G*S, L, C)
    cond_mask = torch.from_numpy(cond_np).repeat_interleave(S, dim=0)
    sampled_co = torch.from_numpy(vals_np * cond_np).repeat_interleave(S, dim=0)
    target = torch.from_numpy(target_np).repeat_interleave(S, dim=0)

    rngs = [_window_rng(master_seed, w.start_index) for w in group]

    def draw_noise():
        return torch.from_numpy(
            np.concatenate([rng.standard_normal((S, L, C)) for rng in rngs]).astype(np.float32)
        )

    with torch.no_grad():
        condition = model.build_condition(sampled_co, cond_mask)
        x = draw_noise() * target
        for k in range(schedule.K, 0, -1):
            k_vec = torch.full((G * S,), k, dtype=torch.long)
            predicted, _ = model(x, k_vec, condition)
            fresh = draw_noise() if k > 1 else torch.zeros_like(x)
            x = step_fn(x, predicted, k, schedule, fresh) * target
            if not torch.isfinite(x).all():
                bad = torch.isfinite(x).reshape(G * S, -1).all(dim=1).logical_not()
                starts = sorted({group[int(i) // S].start_index for i in bad.nonzero().flatten()})
                raise DivergenceError(
                    f"non-finite sample values at step {k} for window starts {starts[:5]}; "
                    "the checkpoint may not match this data scaling"
                )

    drawn = norm.invert_values(x.numpy().astype(np.float64))
    results = []
    for g, w in enumerate(group):
        cond = cond_np[g].astype(np.uint8)
        tgt = target_np[g].astype(np.uint8)
        if raw_values is not None and w.start_index in raw_values:
            full_grid = np.asarray(raw_values[w.start_index], dtype=np.float64)
        else:
            full_grid = norm.invert_values(w.values)
        observed_grid = full_grid * cond
        samples = drawn[g * S:(g + 1) * S] * tgt + observed_grid
        point = np.median(samples, axis=0) * tgt + observed_grid
        results.append(
            ImputationResult(
                start_index=w.start_index,
                point=point,
                samples=samples,
                target_mask=tgt,
                cond_mask=cond,
            )
        )
    return results
