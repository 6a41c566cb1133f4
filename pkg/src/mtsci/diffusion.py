"""Noise schedule plus the closed-form forward noising and single reverse step.

Everything here is plain array algebra; the functions accept and return
numpy arrays or torch tensors interchangeably (they only use `sqrt`-style
elementwise operations and indexing).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCHEDULE_SHAPES = ("linear", "quadratic")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise levels, indexed k = 1..K (arrays are 0-based, k-1)."""

    K: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.K,):
            raise ConfigError(f"beta must have shape ({self.K},), got {beta.shape}")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ConfigError("every beta_k must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        # posterior variance beta_k * (1 - abar_{k-1}) / (1 - abar_k), abar_0 = 1;
        # this makes sigma_1 = 0, matching the zero-noise rule at k = 1.
        alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
        sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma", np.sqrt(sigma2))

    def check_step(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise IndexError(f"diffusion step k={k} outside 1..{self.K}")


def build_schedule(
    K: int,
    beta_1: float = 1e-4,
    beta_K: float = 0.2,
    shape: str = "quadratic",
) -> DiffusionSchedule:
    """Construct the beta sequence and its derived quantities.

    linear:    beta_k = beta_1 + (k-1)/(K-1) * (beta_K - beta_1)
    quadratic: beta_k = (sqrt(beta_1) + (k-1)/(K-1) * (sqrt(beta_K) - sqrt(beta_1)))^2
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if not (0.0 < beta_1 <= beta_K < 1.0):
        raise ConfigError(
            f"need 0 < beta_1 <= beta_K < 1, got beta_1={beta_1}, beta_K={beta_K}"
        )
    if shape not in SCHEDULE_SHAPES:
        raise ConfigError(f"shape must be one of {SCHEDULE_SHAPES}, got {shape!r}")
    if K == 1:
        beta = np.array([beta_1], dtype=np.float64)
    elif shape == "linear":
        beta = np.linspace(beta_1, beta_K, K, dtype=np.float64)
    else:
        beta = np.linspace(math.sqrt(beta_1), math.sqrt(beta_K), K, dtype=np.float64) ** 2
    return DiffusionSchedule(K=K, beta=beta)


def noise_targets(x0_ta, k: int, eps, schedule: DiffusionSchedule):
    """Closed-form forward noising: x_k = sqrt(abar_k) x0 + sqrt(1-abar_k) eps."""
    schedule.check_step(k)
    abar = schedule.alpha_bar[k - 1]
    return math.sqrt(abar) * x0_ta + math.sqrt(1.0 - abar) * eps


def reverse_step(x_k_ta, predicted_eps, k: int, schedule: DiffusionSchedule, fresh_eps):
    """One ancestral step for the noise-prediction objective.

    x_{k-1} = x_k / sqrt(alpha_k)
              - (1 - alpha_k) / (sqrt(1 - abar_k) sqrt(alpha_k)) * predicted_eps
              + sigma_k * fresh_eps

    Callers must pass fresh_eps = 0 when k = 1 (sigma_1 is 0 anyway).
    """
    schedule.check_step(k)
    alpha = schedule.alpha[k - 1]
    abar = schedule.alpha_bar[k - 1]
    sigma = schedule.sigma[k - 1]
    coeff = (1.0 - alpha) / (math.sqrt(1.0 - abar) * math.sqrt(alpha))
    return x_k_ta / math.sqrt(alpha) - coeff * predicted_eps + sigma * fresh_eps


def reverse_step_x0(x_k_ta, predicted_x0, k: int, schedule: DiffusionSchedule, fresh_eps):
    """One ancestral step for the value-prediction objective.

    Posterior mean
      sqrt(alpha_k)(1 - abar_{k-1})/(1 - abar_k) * x_k
      + sqrt(abar_{k-1}) beta_k / (1 - abar_k) * predicted_x0
    with abar_0 = 1, plus sigma_k * fresh_eps.
    """
    schedule.check_step(k)
    alpha = schedule.alpha[k - 1]
    abar = schedule.alpha_bar[k - 1]
    abar_prev = schedule.alpha_bar[k - 2] if k >= 2 else 1.0
    beta = schedule.beta[k - 1]
    sigma = schedule.sigma[k - 1]
    c_xk = math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    c_x0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    return c_xk * x_k_ta + c_x0 * predicted_x0 + sigma * fresh_eps
