"""Training loop: complementary-view denoising with an optional contrastive
pull between the two views' pooled embeddings.

Every random draw comes from numpy Generators seeded per epoch from
SeedSequence([seed, stream_tag, epoch]), so runs with the same seed replay
bit-identically and --resume picks up later epochs without replaying earlier
ones.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import WindowPair, NormStats
from .denoiser import Denoiser, save_checkpoint
from .diffusion import DiffusionSchedule
from .errors import ConfigError, DivergenceError
from .masking import MaskStrategy, sample_training_mask

log = logging.getLogger(__name__)

_EPOCH_TAG = 0x45504F43   # stream id for per-epoch training draws
_VAL_TAG = 0x56414C00     # stream id for the (epoch-constant) validation draws

OBJECTIVES = ("predict_noise", "predict_x0")
REDUCTIONS = ("mean", "sum")

METRICS_HEADER = ["epoch", "train_loss", "denoise_loss", "contrastive_loss", "val_loss"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    lambda_cl: float = 0.1
    intra_on: bool = True
    inter_on: bool = True
    both_views: bool = True
    objective: str = "predict_noise"
    reduction: str = "mean"
    grad_clip: float | None = None
    patience: int | None = 10            # epochs without val improvement; None disables
    lr_decay_milestones: tuple[float, ...] = (0.75, 0.9)  # fractions of epochs
    lr_decay_gamma: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lambda_cl < 0:
            raise ConfigError("lambda_cl must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 (or null to disable)")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")


def masked_denoising_loss(predicted, target, target_mask, reduction: str = "mean") -> torch.Tensor:
    """Squared error restricted to target cells.

    "mean" divides by the number of target cells, "sum" leaves the literal
    sum. An empty target set contributes zero (with a warning): the batch
    simply has nothing to learn from at those cells.
    """
    if reduction not in REDUCTIONS:
        raise ConfigError(f"reduction must be one of {REDUCTIONS}")
    mask = target_mask.to(predicted.dtype)
    count = mask.sum()
    if count.item() == 0:
        warnings.warn("denoising loss over an empty target set; contributing 0")
        return torch.zeros((), dtype=predicted.dtype, device=predicted.device)
    total = ((predicted - target) ** 2 * mask).sum()
    if reduction == "sum":
        return total
    return total / count


def intra_contrastive_loss(z1: torch.Tensor, z2: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """NT-Xent over the 2N pooled view embeddings.

    Row i of z1 and row i of z2 are the two complementary views of the same
    window and form the positive pair; every other embedding in the batch is
    a negative. Cosine similarities are tempered by tau; anchors average.
    """
    if z1.shape != z2.shape:
        raise ConfigError("view embeddings must have matching shapes")
    n = z1.shape[0]
    z = torch.cat([z1, z2], dim=0)                       # (2N, d)
    norms = z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    z = z / norms
    sim = z @ z.T / tau                                  # (2N, 2N)
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))            # drop self-similarity
    log_den = torch.logsumexp(sim, dim=1)
    pos_index = torch.arange(2 * n, device=z.device)
    pos_index = (pos_index + n) % (2 * n)                # partner view
    pos = sim[torch.arange(2 * n, device=z.device), pos_index]
    return (log_den - pos).mean()


def total_loss(denoise: torch.Tensor, contrastive: torch.Tensor | None, lambda_cl: float) -> torch.Tensor:
    if contrastive is None or lambda_cl == 0:
        return denoise
    return denoise + lambda_cl * contrastive


@dataclass
class _PairArrays:
    """Training pairs flattened to contiguous float32 arrays."""

    values: np.ndarray      # (N, L, C) normalized, eval targets concealed
    visible: np.ndarray     # (N, L, C) cells usable for view construction
    ctx_values: np.ndarray  # (N, L, C) context window, zeros when absent
    ctx_mask: np.ndarray    # (N, L, C)
    has_ctx: np.ndarray     # (N,) bool


def _stack_pairs(pairs: list[WindowPair]) -> _PairArrays:
    if not pairs:
        raise ConfigError("no training pairs supplied")
    L, C = pairs[0].sampled.values.shape
    n = len(pairs)
    values = np.zeros((n, L, C), dtype=np.float32)
    visible = np.zeros((n, L, C), dtype=np.float32)
    ctx_values = np.zeros((n, L, C), dtype=np.float32)
    ctx_mask = np.zeros((n, L, C), dtype=np.float32)
    has_ctx = np.zeros(n, dtype=bool)
    for i, pair in enumerate(pairs):
        w = pair.sampled
        vis = w.conditioning_mask.astype(np.float32)
        values[i] = w.values * vis
        visible[i] = vis
        if pair.has_context:
            cvis = pair.context.conditioning_mask.astype(np.float32)
            ctx_values[i] = pair.context.values * cvis
            ctx_mask[i] = cvis
            has_ctx[i] = True
    return _PairArrays(values, visible, ctx_values, ctx_mask, has_ctx)


def _draw_batch_randomness(rng, visible: np.ndarray, strategy: MaskStrategy, K: int):
    """Per-batch draws in a fixed order: view masks, then steps, noise, mix."""
    b, L, C = visible.shape
    m = np.zeros((b, L, C), dtype=np.float32)
    for i in range(b):
        m[i] = sample_training_mask(visible[i], strategy, rng)
    k = rng.integers(1, K + 1, size=b)
    eps = rng.standard_normal((b, L, C)).astype(np.float32)
    # one mixing coefficient per window, broadcast across cells: inference runs
    # with an all-ones matrix, which must lie inside the training distribution
    mix = np.broadcast_to(
        rng.uniform(size=(b, 1, 1)).astype(np.float32), (b, L, C)
    ).copy()
    return m, k, eps, mix


def _noise_coeffs(schedule: DiffusionSchedule, k: np.ndarray):
    a_bar = schedule.alpha_bar[k - 1]
    return (
        torch.from_numpy(np.sqrt(a_bar).astype(np.float32)).view(-1, 1, 1),
        torch.from_numpy(np.sqrt(1.0 - a_bar).astype(np.float32)).view(-1, 1, 1),
    )


def _batch_losses(
    model: Denoiser,
    schedule: DiffusionSchedule,
    arrays: _PairArrays,
    idx: np.ndarray,
    rng,
    strategy: MaskStrategy,
    cfg: TrainConfig,
):
    """Assemble one batch, run both complementary views, return the losses."""
    vis_np = arrays.visible[idx]
    m_np, k_np, eps_np, mix_np = _draw_batch_randomness(rng, vis_np, strategy, schedule.K)

    values = torch.from_numpy(arrays.values[idx])
    visible = torch.from_numpy(vis_np)
    m = torch.from_numpy(m_np)
    eps = torch.from_numpy(eps_np)
    k = torch.from_numpy(k_np.astype(np.int64))
    sqrt_ab, sqrt_1mab = _noise_coeffs(schedule, k_np)

    if cfg.inter_on:
        ctx_values = torch.from_numpy(arrays.ctx_values[idx])
        ctx_mask = torch.from_numpy(arrays.ctx_mask[idx])
        has_ctx = torch.from_numpy(arrays.has_ctx[idx])
        mix = torch.from_numpy(mix_np)
    else:
        ctx_values = None
        ctx_mask = None
        has_ctx = None
        mix = None

    view_specs = [(m, visible - m)]
    if cfg.both_views:
        view_specs.append((visible - m, m))

    denoise_terms = []
    embeddings = []
    for target_mask, cond_mask in view_specs:
        x_in = (sqrt_ab * values + sqrt_1mab * eps) * target_mask
        if ctx_values is not None:
            # the context transform reads the full observed context (a channel
            # map starved of inputs only shrinks its output), but availability
            # is restricted to the view's own conditioning support: the blend
            # perturbs condition values without ever lighting up cells that
            # stay dark at inference (where the mix is all-ones)
            ctx_v = ctx_values
            ctx_m = ctx_mask * cond_mask
        else:
            ctx_v, ctx_m = None, None
        cond = model.build_condition(
            values * cond_mask, cond_mask, ctx_v, ctx_m, mix, has_ctx
        )
        pred, z = model(x_in, k, cond)
        objective = eps if cfg.objective == "predict_noise" else values
        denoise_terms.append(masked_denoising_loss(pred, objective, target_mask, cfg.reduction))
        embeddings.append(z)

    denoise = torch.stack(denoise_terms).mean()
    contrastive = None
    if cfg.intra_on and cfg.lambda_cl > 0 and cfg.both_views:
        contrastive = intra_contrastive_loss(embeddings[0], embeddings[1], model.config.tau)
    return denoise, contrastive, k_np


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    best_path: Path | None = None
    last_path: Path | None = None
    metrics_path: Path | None = None


def _epoch_pass(model, schedule, arrays, order, rng, strategy, cfg, optimizer=None, epoch=0):
    """One sweep over `order`; with an optimizer this is a training epoch,
    without one it accumulates the (fixed-draw) validation loss."""
    training = optimizer is not None
    model.train(training)
    sums = {"total": 0.0, "denoise": 0.0, "contrNum": 0.0}
    n_batches = 0
    cl_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        with torch.set_grad_enabled(training):
            denoise, contrastive, k_np = _batch_losses(
                model, schedule, arrays, idx, rng, strategy, cfg
            )
            loss = total_loss(denoise, contrastive, cfg.lambda_cl)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss {loss.item()} at epoch {epoch} batch {n_batches} "
                f"(diffusion steps {sorted(set(int(s) for s in k_np))}); "
                "lower the learning rate or check the input scaling"
            )
        if training and loss.requires_grad:
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
        sums["total"] += loss.item()
        sums["denoise"] += denoise.item()
        if contrastive is not None:
            sums["contrNum"] += contrastive.item()
            cl_batches += 1
        n_batches += 1
    return {
        "total": sums["total"] / n_batches,
        "denoise": sums["denoise"] / n_batches,
        "contrastive": sums["contrNum"] / cl_batches if cl_batches else 0.0,
    }


def train(
    model: Denoiser,
    schedule: DiffusionSchedule,
    train_pairs: list[WindowPair],
    val_pairs: list[WindowPair],
    strategy: MaskStrategy,
    cfg: TrainConfig,
    out_dir,
    norm: NormStats,
    diffusion_params: dict,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    prior_history: list[dict] | None = None,
) -> TrainResult:
    """Fit the denoiser; writes metrics.csv, best.pt and last.pt to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_arrays = _stack_pairs(train_pairs)
    val_arrays = _stack_pairs(val_pairs) if val_pairs else None

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=1e-6)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    milestones = {int(cfg.epochs * frac) for frac in cfg.lr_decay_milestones}

    result = TrainResult(history=list(prior_history or []))
    for row in result.history:
        if row["val_loss"] < result.best_val:
            result.best_val, result.best_epoch = row["val_loss"], row["epoch"]

    metrics_path = out_dir / "metrics.csv"
    mode = "a" if start_epoch > 0 and metrics_path.exists() else "w"
    metrics_file = open(metrics_path, mode, newline="")
    writer = csv.writer(metrics_file)
    if mode == "w":
        writer.writerow(METRICS_HEADER)
        metrics_file.flush()

    n = len(train_pairs)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if epoch in milestones:
                for group in optimizer.param_groups:
                    group["lr"] *= cfg.lr_decay_gamma
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _EPOCH_TAG, epoch]))
            order = rng.permutation(n)
            stats = _epoch_pass(
                model, schedule, train_arrays, order, rng, strategy, cfg,
                optimizer=optimizer, epoch=epoch,
            )

            if val_arrays is not None:
                val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _VAL_TAG]))
                val_order = np.arange(len(val_pairs))
                with torch.no_grad():
                    val_stats = _epoch_pass(
                        model, schedule, val_arrays, val_order, val_rng, strategy, cfg,
                        optimizer=None, epoch=epoch,
                    )
                val_loss = val_stats["total"]
            else:
                val_loss = stats["total"]

            row = {
                "epoch": epoch,
                "train_loss": stats["total"],
                "denoise_loss": stats["denoise"],
                "contrastive_loss": stats["contrastive"],
                "val_loss": val_loss,
            }
            result.history.append(row)
            writer.writerow([row[h] for h in METRICS_HEADER])
            metrics_file.flush()
            log.info(
                "epoch %d train %.6f denoise %.6f contrastive %.6f val %.6f",
                epoch, row["train_loss"], row["denoise_loss"],
                row["contrastive_loss"], val_loss,
            )

            meta = {"epoch": epoch, "val_loss": val_loss, "train_loss": stats["total"],
                    "history": result.history}
            if val_loss < result.best_val:
                result.best_val = val_loss
                result.best_epoch = epoch
                result.best_path = out_dir / "best.pt"
                save_checkpoint(result.best_path, model, diffusion_params, norm, meta=meta)
            result.last_path = out_dir / "last.pt"
            save_checkpoint(
                result.last_path, model, diffusion_params, norm, meta=meta,
                optimizer_state=optimizer.state_dict(),
            )
            if cfg.patience is not None and epoch - result.best_epoch >= cfg.patience:
                log.info("early stop at epoch %d (no val improvement for %d epochs)",
                         epoch, cfg.patience)
                break
    finally:
        metrics_file.close()

    if result.best_path is None:  # no validation improvement ever recorded
        result.best_path = out_dir / "best.pt"
        save_checkpoint(result.best_path, model, diffusion_params, norm,
                        meta={"epoch": cfg.epochs - 1, "history": result.history})
    result.metrics_path = metrics_path
    return result
