"""Noise-prediction network: diffusion-step embedding, mixup condition
encoder, stacked temporal + feature-axis (inverted) transformer layers, and
the decoder head that merges every layer's output.

Tensors are laid out (B, L, C) for windows and (B, L, C, d) for hidden
states; the temporal block attends over L per feature, the inverted block
attends over C per time step.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import NormStats
from .errors import CheckpointMismatchError, ConfigError

CHECKPOINT_VERSION = 1
COND_FUSION_MODES = ("concat", "add")
POOL_MODES = ("mean", "flatten")


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 64
    num_layers: int = 2
    num_heads: int = 8
    tau: float = 0.1
    dropout: float = 0.0
    ff_dim: int | None = None           # transformer feed-forward width, default d
    cond_fusion: str = "concat"
    contrastive_pool: str = "mean"

    def __post_init__(self):
        if self.d % 2 != 0:
            raise ConfigError(f"hidden width d must be even, got {self.d}")
        if self.d < 4:
            raise ConfigError(f"hidden width d must be >= 4, got {self.d}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.d % self.num_heads != 0:
            raise ConfigError(f"num_heads {self.num_heads} must divide d {self.d}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.cond_fusion not in COND_FUSION_MODES:
            raise ConfigError(f"cond_fusion must be one of {COND_FUSION_MODES}")
        if self.contrastive_pool not in POOL_MODES:
            raise ConfigError(f"contrastive_pool must be one of {POOL_MODES}")


def step_embedding_bank(k, d: int) -> torch.Tensor:
    """Sinusoidal diffusion-step features, frequencies 10^(4j/(w-1)), j < w = d/2.

    k may be an int or a 1-D tensor of steps; the result has d entries per
    step: w sines then w cosines.
    """
    if d % 2 != 0:
        raise ConfigError(f"step embedding width must be even, got {d}")
    w = d // 2
    steps = torch.as_tensor(k, dtype=torch.float64).reshape(-1, 1)
    j = torch.arange(w, dtype=torch.float64)
    freqs = 10.0 ** (4.0 * j / (w - 1)) if w > 1 else torch.ones(1, dtype=torch.float64)
    angles = steps * freqs
    bank = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if np.ndim(k) == 0:
        bank = bank.squeeze(0)
    return bank


class StepEmbedding(nn.Module):
    """Sinusoidal bank followed by two linear layers, SiLU after each."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.lin1 = nn.Linear(d, d)
        self.lin2 = nn.Linear(d, d)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        dtype = self.lin1.weight.dtype
        bank = step_embedding_bank(k, self.d).to(dtype)
        return F.silu(self.lin2(F.silu(self.lin1(bank))))


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Standard transformer position table of shape (length, d)."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table.to(dtype)


@dataclass
class ConditionInput:
    """Mixed conditioning values and their lifted hidden representation."""

    x_mix: torch.Tensor   # (B, L, C)
    c: torch.Tensor       # (B, L, C, d)
    mix_matrix: torch.Tensor  # (B, L, C), all-ones at inference


class ConditionEncoder(nn.Module):
    """Blend sampled-window observations with the transformed context window.

    The context transform is a 1x1 convolution across features (a learned
    per-time-step channel map); the blend is lifted per cell to width d and
    zeroed wherever neither source provides information.
    """

    def __init__(self, num_features: int, d: int):
        super().__init__()
        self.context_transform = nn.Conv1d(num_features, num_features, kernel_size=1)
        # start the channel map at identity: the transformed context then
        # begins as the context itself instead of a random feature blend,
        # which keeps early-training blended conditions on the right scale
        with torch.no_grad():
            self.context_transform.weight.copy_(
                torch.eye(num_features).unsqueeze(-1)
            )
            self.context_transform.bias.zero_()
        self.lift = nn.Linear(1, d)

    def forward(
        self,
        sampled_co: torch.Tensor,       # (B, L, C), zeros off the conditioning set
        cond_mask: torch.Tensor,        # (B, L, C)
        context_co: torch.Tensor | None,    # (B, L, C) or None
        context_mask: torch.Tensor | None,  # (B, L, C) or None
        mix_matrix: torch.Tensor | None,    # (B, L, C) in [0, 1] or None for all-ones
        has_context: torch.Tensor | None,   # (B,) bool
    ) -> ConditionInput:
        if sampled_co.shape != cond_mask.shape:
            raise ConfigError("sampled_co and cond_mask shapes differ")
        B, L, C = sampled_co.shape
        dtype = sampled_co.dtype
        if has_context is None:
            has_context = torch.zeros(B, dtype=torch.bool, device=sampled_co.device)
        has = has_context.to(dtype).view(B, 1, 1)
        if mix_matrix is None:
            mix = torch.ones_like(sampled_co)
        else:
            if mix_matrix.shape != sampled_co.shape:
                raise ConfigError("mix_matrix shape must match the window shape")
            # windows without a context degenerate to sampled-only conditioning
            mix = mix_matrix * has + (1.0 - has)
        if context_co is None:
            ctx = torch.zeros_like(sampled_co)
            ctx_mask = torch.zeros_like(cond_mask)
        else:
            if context_co.shape != sampled_co.shape:
                raise ConfigError("context window shape must match the sampled window")
            ctx = context_co * has
            ctx_mask = context_mask * has
        ctx_t = self.context_transform(ctx.transpose(1, 2)).transpose(1, 2)
        # the blend engages only where the context actually provides a value;
        # elsewhere the coefficient collapses to 1 (same degenerate rule as a
        # missing context window, applied per cell)
        mix = 1.0 - (1.0 - mix) * ctx_mask
        x_mix = mix * sampled_co + (1.0 - mix) * ctx_t
        available = ((cond_mask + ctx_mask) > 0).to(dtype)
        c = self.lift(x_mix.unsqueeze(-1)) * available.unsqueeze(-1)
        return ConditionInput(x_mix=x_mix, c=c, mix_matrix=mix)


class EncoderLayer(nn.Module):
    """Condition-fused temporal transformer followed by an inverted
    (feature-axis) transformer; shapes are preserved."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.d
        ff = config.ff_dim or d
        if config.cond_fusion == "concat":
            self.fuse = nn.Linear(2 * d, d)
        else:
            self.fuse = nn.Linear(d, d)
        self.cond_fusion = config.cond_fusion
        self.temporal = nn.TransformerEncoderLayer(
            d_model=d, nhead=config.num_heads, dim_feedforward=ff,
            dropout=config.dropout, activation="gelu", batch_first=True,
        )
        self.inverted = nn.TransformerEncoderLayer(
            d_model=d, nhead=config.num_heads, dim_feedforward=ff,
            dropout=config.dropout, activation="gelu", batch_first=True,
        )

    def forward(self, h: torch.Tensor, c: torch.Tensor, te: torch.Tensor, fe: torch.Tensor) -> torch.Tensor:
        B, L, C, d = h.shape
        if self.cond_fusion == "concat":
            fused = self.fuse(torch.cat([h, c], dim=-1))
        else:
            fused = self.fuse(h + c)
        t_in = fused + te.view(1, L, 1, d)
        t_in = t_in.permute(0, 2, 1, 3).reshape(B * C, L, d)
        H = self.temporal(t_in).reshape(B, C, L, d).permute(0, 2, 1, 3)
        i_in = H + fe.view(1, 1, C, d)
        i_in = i_in.reshape(B * L, C, d)
        H_inv = self.inverted(i_in).reshape(B, L, C, d)
        return H_inv


class Denoiser(nn.Module):
    """Predict the noise at imputation targets given the mixed condition.

    forward returns the per-cell noise estimate and a pooled per-sample view
    embedding taken after the encoder.
    """

    def __init__(self, config: DenoiserConfig, window_length: int, num_features: int):
        super().__init__()
        self.config = config
        self.window_length = window_length
        self.num_features = num_features
        d = config.d
        self.input_lift = nn.Linear(1, d)
        self.step_embedding = StepEmbedding(d)
        self.condition = ConditionEncoder(num_features, d)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.register_buffer("te", sinusoidal_positions(window_length, d), persistent=False)
        self.fe = nn.Parameter(torch.randn(num_features, d) * 0.02)
        self.out_norm = nn.LayerNorm(config.num_layers * d)
        self.out_lin1 = nn.Linear(config.num_layers * d, d)
        self.out_lin2 = nn.Linear(d, 1)
        nn.init.zeros_(self.out_lin2.weight)
        nn.init.zeros_(self.out_lin2.bias)

    def build_condition(
        self,
        sampled_co: torch.Tensor,
        cond_mask: torch.Tensor,
        context_co: torch.Tensor | None = None,
        context_mask: torch.Tensor | None = None,
        mix_matrix: torch.Tensor | None = None,
        has_context: torch.Tensor | None = None,
    ) -> ConditionInput:
        return self.condition(sampled_co, cond_mask, context_co, context_mask, mix_matrix, has_context)

    def forward(self, x_ta: torch.Tensor, k: torch.Tensor, condition: ConditionInput):
        B, L, C = x_ta.shape
        if (L, C) != (self.window_length, self.num_features):
            raise ConfigError(
                f"input window shape ({L}, {C}) does not match the model "
                f"({self.window_length}, {self.num_features})"
            )
        if condition.c.shape[:3] != (B, L, C):
            raise ConfigError("condition was built for a different window shape")
        p_k = self.step_embedding(k)          # (B, d)
        h = self.input_lift(x_ta.unsqueeze(-1)) + p_k.view(B, 1, 1, -1)
        outputs = []
        for layer in self.layers:
            h = layer(h, condition.c, self.te.to(h.dtype), self.fe)
            outputs.append(h)
        merged = self.out_norm(torch.cat(outputs, dim=-1))
        eps = self.out_lin2(F.relu(self.out_lin1(merged))).squeeze(-1)
        if self.config.contrastive_pool == "mean":
            z = h.mean(dim=(1, 2))
        else:
            z = h.reshape(B, -1)
        return eps, z


def save_checkpoint(
    path,
    model: Denoiser,
    diffusion_params: dict,
    norm: NormStats,
    meta: dict | None = None,
    optimizer_state: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "window_length": model.window_length,
        "num_features": model.num_features,
        "diffusion": dict(diffusion_params),
        "norm": {
            "mean": norm.mean.tolist(),
            "std": norm.std.tolist(),
            "feature_names": list(norm.feature_names),
        },
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    if optimizer_state is not None:
        payload["optimizer_state"] = optimizer_state
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint format {version!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def instantiate_checkpoint(payload: dict, expect_shape: tuple[int, int] | None = None):
    """Rebuild (model, norm_stats) from a loaded checkpoint payload."""
    config = DenoiserConfig(**payload["model_config"])
    L, C = payload["window_length"], payload["num_features"]
    if expect_shape is not None and tuple(expect_shape) != (L, C):
        raise CheckpointMismatchError(
            f"checkpoint was trained for windows {(L, C)}, data has {tuple(expect_shape)}"
        )
    model = Denoiser(config, L, C)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"checkpoint parameters do not fit: {exc}") from exc
    model.eval()
    norm = NormStats(
        mean=np.array(payload["norm"]["mean"]),
        std=np.array(payload["norm"]["std"]),
        feature_names=list(payload["norm"]["feature_names"]),
    )
    return model, norm
