"""Synthetic multivariate series: shared sinusoidal latents, per-feature
mixing weights, Gaussian measurement noise. Useful for end-to-end checks
where ground truth and learnability are controlled.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

DEFAULT_PERIODS = (6.0, 8.0, 12.0, 24.0, 48.0)


def generate_values(
    num_steps: int,
    num_features: int = 5,
    noise_std: float = 0.2,
    seed: int = 0,
    periods: tuple[float, ...] = DEFAULT_PERIODS,
) -> np.ndarray:
    """(num_steps, num_features) array of mixed sinusoids plus noise.

    Each latent j is sin(2*pi*t/P_j + phase_j); each feature mixes the
    latents with unit-normalized weights, so the clean signal has roughly
    unit scale and the noise floor is exactly noise_std.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53594E]))
    t = np.arange(num_steps, dtype=np.float64)
    phases = rng.uniform(0, 2 * np.pi, size=len(periods))
    latents = np.stack(
        [np.sin(2 * np.pi * t / p + ph) for p, ph in zip(periods, phases)], axis=1
    )  # (T, J)
    weights = rng.normal(size=(num_features, len(periods)))
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    clean = latents @ weights.T  # (T, C)
    offsets = rng.uniform(-0.5, 0.5, size=num_features)
    noise = rng.normal(scale=noise_std, size=clean.shape)
    return clean + offsets + noise


def write_series_csv(
    path,
    values: np.ndarray,
    start: str = "2020-01-01T00:00:00",
    step_minutes: int = 60,
    missing_fraction: float = 0.0,
    seed: int = 0,
) -> Path:
    """Write values to the pipeline's CSV layout (ISO timestamps, empty cells
    for missing); missing_fraction blanks cells uniformly at random."""
    path = Path(path)
    num_steps, num_features = values.shape
    stamps = np.datetime64(start) + np.arange(num_steps) * np.timedelta64(step_minutes, "m")
    drop = np.zeros(values.shape, dtype=bool)
    if missing_fraction > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x44524F50]))
        drop = rng.random(values.shape) < missing_fraction
    header = ["timestamp"] + [f"s{j}" for j in range(num_features)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(num_steps):
            row = [str(stamps[i])]
            for j in range(num_features):
                row.append("" if drop[i, j] else repr(float(values[i, j])))
            writer.writerow(row)
    return path


def make_synthetic_csv(
    path,
    num_steps: int = 48_000,
    num_features: int = 5,
    noise_std: float = 0.2,
    seed: int = 0,
    missing_fraction: float = 0.0,
) -> Path:
    values = generate_values(num_steps, num_features, noise_std, seed)
    return write_series_csv(path, values, missing_fraction=missing_fraction, seed=seed)
