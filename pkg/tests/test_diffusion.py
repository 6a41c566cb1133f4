"""Noise-schedule algebra: hand-verified constants, closed-form vs iterative
noising, and the reverse-step identities that make K=1 sampling exact."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsci.diffusion import (
    DiffusionSchedule,
    build_schedule,
    noise_targets,
    reverse_step,
    reverse_step_x0,
)
from mtsci.errors import ConfigError

HAND_BETA = np.array([0.1, 0.2, 0.3])


def hand_schedule():
    return DiffusionSchedule(K=3, beta=HAND_BETA)


def test_alpha_bar_hand_case():
    s = hand_schedule()
    assert s.alpha == pytest.approx([0.9, 0.8, 0.7])
    assert s.alpha_bar == pytest.approx([0.9, 0.7200000000000001, 0.504], abs=0, rel=1e-15)


def test_sigma_hand_case():
    s = hand_schedule()
    # sigma_1 is exactly zero: the k=1 step adds no fresh noise
    assert s.sigma[0] == 0.0
    assert s.sigma[1] == pytest.approx(0.2672612419124244, rel=1e-14)
    assert s.sigma[2] == pytest.approx(0.4115274458765507, rel=1e-14)


def test_quadratic_default_endpoints():
    s = build_schedule(K=50)
    assert s.beta[0] == pytest.approx(1e-4, rel=1e-12)
    assert s.beta[-1] == pytest.approx(0.2, rel=1e-12)
    assert s.beta[24] == pytest.approx(0.05024117582090774, rel=1e-12)


def test_linear_endpoints():
    s = build_schedule(K=10, shape="linear")
    assert s.beta[0] == 1e-4
    assert s.beta[-1] == 0.2
    diffs = np.diff(s.beta)
    assert diffs == pytest.approx(np.full(9, diffs[0]))


def test_single_step_schedule():
    s = build_schedule(K=1)
    assert s.beta.shape == (1,)
    assert s.sigma[0] == 0.0
    assert s.alpha_bar[0] == pytest.approx(1 - 1e-4)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(K=0),
        dict(K=5, beta_1=0.0),
        dict(K=5, beta_1=0.3, beta_K=0.2),
        dict(K=5, beta_K=1.0),
        dict(K=5, shape="cosine"),
    ],
)
def test_bad_schedules_raise(kwargs):
    with pytest.raises(ConfigError):
        build_schedule(**kwargs)


def test_check_step_bounds():
    s = hand_schedule()
    with pytest.raises(IndexError):
        s.check_step(0)
    with pytest.raises(IndexError):
        s.check_step(4)


def test_noising_hand_value():
    s = hand_schedule()
    # sqrt(0.72)*1 + sqrt(0.28)*0.5
    assert noise_targets(1.0, 2, 0.5, s) == pytest.approx(1.1131032685303162, rel=1e-14)


def test_reverse_step_hand_value():
    s = hand_schedule()
    got = reverse_step(1.0, 0.3, 2, s, 0.5)
    assert got == pytest.approx(1.1248914714968297, rel=1e-14)


def test_reverse_step_x0_hand_value():
    s = hand_schedule()
    got = reverse_step_x0(1.0, 0.4, 2, s, 0.5)
    assert got == pytest.approx(0.7241212743277576, rel=1e-14)


def test_closed_form_matches_iterative_moments():
    """Simulating the chain step by step and jumping straight to x_K must
    agree in mean and variance within 3 standard errors over 1e4 draws."""
    n = 10_000
    s = build_schedule(K=50)
    x0 = 0.7
    rng_a = np.random.default_rng(11)
    rng_b = np.random.default_rng(22)

    closed = noise_targets(np.full(n, x0), s.K, rng_a.standard_normal(n), s)

    iterative = np.full(n, x0)
    for k in range(1, s.K + 1):
        beta = s.beta[k - 1]
        iterative = math.sqrt(1.0 - beta) * iterative + math.sqrt(beta) * rng_b.standard_normal(n)

    var_theory = 1.0 - s.alpha_bar[-1]
    se_mean = math.sqrt(2.0 * var_theory / n)
    assert abs(closed.mean() - iterative.mean()) < 3 * se_mean
    se_var = var_theory * math.sqrt(4.0 / (n - 1))
    assert abs(closed.var() - iterative.var()) < 3 * se_var
    # and both match the closed-form theory directly
    assert abs(closed.mean() - math.sqrt(s.alpha_bar[-1]) * x0) < 3 * math.sqrt(var_theory / n)
    assert abs(iterative.var() - var_theory) < 3 * var_theory * math.sqrt(2.0 / (n - 1))


def test_k1_round_trip_is_exact():
    """With K=1 and the true noise plugged in, one reverse step returns x0 to
    floating-point accuracy (the sampler oracle identity)."""
    s = build_schedule(K=1, beta_1=0.01)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((6, 4))
    eps = rng.standard_normal((6, 4))
    x1 = noise_targets(x0, 1, eps, s)
    back = reverse_step(x1, eps, 1, s, 0.0)
    assert np.max(np.abs(back - x0)) < 1e-12


def test_k1_round_trip_x0_objective():
    s = build_schedule(K=1, beta_1=0.01)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((5, 3))
    x1 = noise_targets(x0, 1, rng.standard_normal((5, 3)), s)
    back = reverse_step_x0(x1, x0, 1, s, 0.0)
    assert np.max(np.abs(back - x0)) < 1e-12


@given(
    K=st.integers(min_value=2, max_value=200),
    beta_1=st.floats(min_value=1e-6, max_value=0.05),
    spread=st.floats(min_value=1.0, max_value=50.0),
    shape=st.sampled_from(["linear", "quadratic"]),
)
@settings(max_examples=60, deadline=None)
def test_schedule_invariants(K, beta_1, spread, shape):
    beta_K = min(beta_1 * spread, 0.5)
    s = build_schedule(K=K, beta_1=beta_1, beta_K=beta_K, shape=shape)
    assert np.all(np.diff(s.beta) >= -1e-15)            # non-decreasing betas
    assert np.all(np.diff(s.alpha_bar) < 0)             # strictly shrinking signal
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    assert s.sigma[0] == 0.0
    # posterior noise never exceeds the forward noise of the same step
    assert np.all(s.sigma <= np.sqrt(s.beta) + 1e-15)


@given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_noising_interpolates_endpoints(K, seed):
    rng = np.random.default_rng(seed)
    s = build_schedule(K=K)
    x0 = rng.standard_normal(8)
    eps = rng.standard_normal(8)
    for k in (1, K):
        xk = noise_targets(x0, k, eps, s)
        w = math.sqrt(s.alpha_bar[k - 1])
        assert np.allclose(xk, w * x0 + math.sqrt(1 - w * w) * eps)
