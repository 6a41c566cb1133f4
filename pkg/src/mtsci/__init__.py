"""Conditional diffusion imputation for multivariate time series.

Submodules:
    dataset    CSV loading, splits, windows, missing-pattern simulation
    masking    self-supervised target masks and complementary views
    diffusion  noise schedules and forward/reverse step algebra
    denoiser   the conditional noise-prediction network
    training   loss functions and the fitting loop
    sampler    probabilistic imputation by reverse diffusion
    metrics    MAE/RMSE/MAPE/CRPS and trivial baselines
    cli        the `mtsci` command line
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DivergenceError,
    JoinError,
    MtsciError,
    ParseError,
    ValidationError,
)

__all__ = [
    "__version__",
    "MtsciError",
    "ConfigError",
    "ParseError",
    "ValidationError",
    "CheckpointMismatchError",
    "DivergenceError",
    "JoinError",
]
