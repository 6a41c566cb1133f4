"""Reverse-diffusion imputation: copy-through, determinism, oracle recovery."""
import math

import numpy as np
import pytest
import torch

from mtsci.dataset import NormStats, Window
from mtsci.denoiser import Denoiser, DenoiserConfig
from mtsci.diffusion import build_schedule
from mtsci.errors import DivergenceError, ValidationError
from mtsci.sampler import (
    DEFAULT_NUM_SAMPLES,
    ImputationResult,
    impute_dataset,
    impute_window,
)

L, C = 6, 2


def _norm(mean=(1.0, -2.0), std=(2.0, 0.5)):
    return NormStats(mean=np.array(mean), std=np.array(std), feature_names=["f0", "f1"])


def _window(start, cond, values):
    cond = np.asarray(cond, dtype=np.uint8)
    return Window(
        values=np.asarray(values, dtype=np.float64) * cond,
        obs_mask=cond,
        eval_mask=np.zeros((L, C), dtype=np.uint8),
        start_index=start,
    )


def _random_setup(n_windows=3, seed=0, hole_prob=0.3):
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n_windows):
        cond = (rng.uniform(size=(L, C)) > hole_prob).astype(np.uint8)
        vals = rng.standard_normal((L, C))
        windows.append(_window(i * L, cond, vals))
    return windows


def _model(seed=0):
    torch.manual_seed(seed)
    model = Denoiser(DenoiserConfig(d=16, num_layers=1, num_heads=4), L, C)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        model.out_lin2.weight.copy_(torch.randn(model.out_lin2.weight.shape, generator=g) * 0.1)
    model.eval()
    return model


class _ExactNoiseOracle:
    """Duck-typed denoiser that returns the noise consistent with a known x0."""

    def __init__(self, x0_norm, schedule):
        self.x0 = torch.from_numpy(np.asarray(x0_norm, dtype=np.float32))
        self.schedule = schedule

    def build_condition(self, sampled_co, cond_mask):
        return None

    def __call__(self, x, k_vec, condition):
        k = int(k_vec[0])
        ab = self.schedule.alpha_bar[k - 1]
        eps = (x - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab)
        return eps, None


class _ExactValueOracle(_ExactNoiseOracle):
    """Returns x0 itself, for the predict_x0 reverse path."""

    def __call__(self, x, k_vec, condition):
        return self.x0.expand_as(x).clone(), None


class _NaNModel:
    def build_condition(self, sampled_co, cond_mask):
        return None

    def __call__(self, x, k_vec, condition):
        return torch.full_like(x, float("nan")), None


def test_empty_target_returns_observations():
    norm = _norm()
    truth = np.random.default_rng(1).standard_normal((L, C))
    w = _window(0, np.ones((L, C)), truth)
    result = impute_window(w, _model(), build_schedule(5), norm, num_samples=3)
    expected = norm.invert_values(w.values)
    for s in range(3):
        assert np.array_equal(result.samples[s], expected)
    assert np.array_equal(result.point, expected)


def test_samples_differ_but_share_observed_cells():
    [w] = _random_setup(1)
    norm = _norm()
    result = impute_window(w, _model(), build_schedule(5), norm, num_samples=2, master_seed=7)
    tgt = result.target_mask.astype(bool)
    assert not np.allclose(result.samples[0][tgt], result.samples[1][tgt])
    assert np.array_equal(result.samples[0][~tgt], result.samples[1][~tgt])


def test_exact_noise_oracle_recovers_truth_at_K1():
    rng = np.random.default_rng(3)
    x0_norm = rng.standard_normal((L, C))
    norm = _norm()
    truth = norm.invert_values(x0_norm)
    cond = (rng.uniform(size=(L, C)) > 0.4).astype(np.uint8)
    w = _window(0, cond, x0_norm)
    schedule = build_schedule(1, beta_1=0.3, beta_K=0.3)
    result = impute_window(
        w, _ExactNoiseOracle(x0_norm, schedule), schedule, norm, num_samples=2,
    )
    tgt = result.target_mask.astype(bool)
    assert np.allclose(result.point[tgt], truth[tgt], atol=1e-5)


def test_exact_value_oracle_recovers_truth_with_x0_objective():
    rng = np.random.default_rng(4)
    x0_norm = rng.standard_normal((L, C))
    norm = _norm()
    truth = norm.invert_values(x0_norm)
    cond = (rng.uniform(size=(L, C)) > 0.4).astype(np.uint8)
    w = _window(0, cond, x0_norm)
    schedule = build_schedule(3, beta_1=0.05, beta_K=0.2)
    result = impute_window(
        w, _ExactValueOracle(x0_norm, schedule), schedule, norm,
        num_samples=2, objective="predict_x0",
    )
    tgt = result.target_mask.astype(bool)
    assert np.allclose(result.point[tgt], truth[tgt], atol=1e-5)


def test_copy_through_is_bit_exact_with_raw_values():
    # a norm whose round trip is lossy must not disturb observed cells
    [w] = _random_setup(1, seed=9)
    norm = _norm(mean=(0.1234567, -9.87), std=(3.33333, 0.77777))
    raw = np.random.default_rng(10).standard_normal((L, C)) * 100
    result = impute_window(
        w, _model(), build_schedule(4), norm, num_samples=2, raw_values=raw,
    )
    obs = result.cond_mask.astype(bool)
    assert np.array_equal(result.point[obs], raw[obs])
    assert np.array_equal(result.samples[0][obs], raw[obs])


def test_dataset_results_are_deterministic():
    windows = _random_setup(3)
    model = _model()
    norm = _norm()
    schedule = build_schedule(4)
    a = impute_dataset(windows, model, schedule, norm, num_samples=2, master_seed=5)
    b = impute_dataset(windows, model, schedule, norm, num_samples=2, master_seed=5)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.samples, rb.samples)


def test_dataset_results_ignore_window_order_and_batching():
    windows = _random_setup(4, seed=2)
    model = _model()
    norm = _norm()
    schedule = build_schedule(4)
    base = {
        r.start_index: r
        for r in impute_dataset(windows, model, schedule, norm, num_samples=2,
                                master_seed=5, batch_windows=4)
    }
    shuffled = list(reversed(windows))
    other = impute_dataset(shuffled, model, schedule, norm, num_samples=2,
                           master_seed=5, batch_windows=1)
    assert [r.start_index for r in other] == [w.start_index for w in shuffled]
    for r in other:
        assert np.array_equal(r.samples, base[r.start_index].samples)
        assert np.array_equal(r.point, base[r.start_index].point)


def test_single_sample_point_estimate():
    [w] = _random_setup(1, seed=6)
    result = impute_window(w, _model(), build_schedule(3), _norm(), num_samples=1)
    assert np.array_equal(result.point, result.samples[0])


def test_different_seeds_differ():
    [w] = _random_setup(1, seed=8)
    model = _model()
    schedule = build_schedule(3)
    a = impute_window(w, model, schedule, _norm(), num_samples=1, master_seed=0)
    b = impute_window(w, model, schedule, _norm(), num_samples=1, master_seed=1)
    tgt = a.target_mask.astype(bool)
    assert not np.allclose(a.point[tgt], b.point[tgt])


def test_quantiles_shape_and_order():
    [w] = _random_setup(1, seed=11)
    result = impute_window(w, _model(), build_schedule(3), _norm(), num_samples=16)
    q = result.quantiles([0.05, 0.5, 0.95])
    assert q.shape == (3, L, C)
    assert (q[0] <= q[1]).all() and (q[1] <= q[2]).all()


def test_median_is_sample_permutation_invariant():
    [w] = _random_setup(1, seed=12)
    result = impute_window(w, _model(), build_schedule(3), _norm(), num_samples=5)
    reordered = result.samples[::-1].copy()
    tgt = result.target_mask
    obs_grid = result.point * (1 - tgt)
    again = np.median(reordered, axis=0) * tgt + obs_grid
    assert np.allclose(again, result.point)


def test_divergence_names_step_and_window():
    windows = _random_setup(2, seed=13)
    with pytest.raises(DivergenceError, match=r"step 4 for window starts \[0, 6\]"):
        impute_dataset(windows, _NaNModel(), build_schedule(4), _norm(),
                       num_samples=2, batch_windows=2)


def test_bad_sample_count_rejected():
    with pytest.raises(ValidationError):
        impute_dataset(_random_setup(1), _model(), build_schedule(3), _norm(), num_samples=0)


def test_empty_window_list():
    assert impute_dataset([], _model(), build_schedule(3), _norm()) == []


def test_default_sample_count():
    assert DEFAULT_NUM_SAMPLES == 100
