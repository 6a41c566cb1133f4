"""Training-target masks and the complementary dual views: exhaustive
partition checks on tiny windows plus randomized larger windows."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsci.dataset import Window
from mtsci.errors import ConfigError, ValidationError
from mtsci.masking import (
    BLOCK_PROB_MAX,
    ComplementaryViews,
    MaskStrategy,
    complementary_views,
    sample_training_mask,
)


def window_from_masks(obs, eval_mask=None, values=None):
    obs = np.asarray(obs, dtype=np.uint8)
    if values is None:
        rng = np.random.default_rng(0)
        values = rng.standard_normal(obs.shape)
    if eval_mask is None:
        eval_mask = np.zeros_like(obs)
    return Window(values=values, obs_mask=obs, eval_mask=eval_mask, start_index=0)


# ------------------------------------------------------------- MaskStrategy

def test_strategy_defaults_and_caps():
    point = MaskStrategy(kind="point")
    assert point.ratio_max == 1.0
    block = MaskStrategy(kind="block")
    assert block.ratio_max == BLOCK_PROB_MAX


def test_strategy_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        MaskStrategy(kind="point", ratio_min=0.7, ratio_max=0.3)
    with pytest.raises(ConfigError):
        MaskStrategy(kind="block", fixed_ratio=0.5)  # above the block cap
    with pytest.raises(ConfigError):
        MaskStrategy(kind="banana")


def test_block_bounds_default_follows_window():
    s = MaskStrategy(kind="block")
    assert s.block_bounds(24) == (12, 24)
    assert MaskStrategy(kind="block", block_length_range=(3, 5)).block_bounds(24) == (3, 5)


# ------------------------------------------------------------ mask sampling

def test_forced_full_and_empty_ratio():
    obs = np.ones((6, 4), dtype=np.uint8)
    all_of_it = sample_training_mask(obs, MaskStrategy(kind="point", fixed_ratio=1.0), 0)
    assert np.array_equal(all_of_it, obs)
    none_of_it = sample_training_mask(obs, MaskStrategy(kind="point", fixed_ratio=0.0), 0)
    assert none_of_it.sum() == 0


def test_point_ratio_concentrates_at_1e5_cells():
    obs = np.ones((1000, 100), dtype=np.uint8)
    m = sample_training_mask(obs, MaskStrategy(kind="point", fixed_ratio=0.5), 123)
    assert abs(m.mean() - 0.5) < 0.01


def test_mask_never_exceeds_observed():
    rng = np.random.default_rng(8)
    obs = (rng.random((24, 5)) > 0.4).astype(np.uint8)
    for kind in ("point", "block"):
        m = sample_training_mask(obs, MaskStrategy(kind=kind, fixed_ratio=0.1), rng)
        assert not (m & ~obs & 1).any()


def test_block_mask_produces_runs():
    obs = np.ones((24, 3), dtype=np.uint8)
    m = sample_training_mask(
        obs, MaskStrategy(kind="block", fixed_ratio=0.1, block_length_range=(12, 24)), 5
    )
    # at probability 0.1 over 72 start positions some block fires, and any
    # block covers at least 12 consecutive steps of one feature
    assert m.sum() >= 12
    col_runs = m.sum(axis=0)
    assert col_runs.max() >= 12


def test_sampling_deterministic_from_seed():
    obs = np.ones((24, 5), dtype=np.uint8)
    strat = MaskStrategy(kind="point")
    a = sample_training_mask(obs, strat, 77)
    b = sample_training_mask(obs, strat, 77)
    assert np.array_equal(a, b)


# ------------------------------------------------------ complementary views

def test_views_partition_exhaustive_2x2():
    """All 16 target masks over a fully observed 2x2 window: the two views'
    targets partition the visible set exactly."""
    obs = np.ones((2, 2), dtype=np.uint8)
    w = window_from_masks(obs)
    for bits in itertools.product((0, 1), repeat=4):
        m = np.array(bits, dtype=np.uint8).reshape(2, 2)
        views = complementary_views(w, m)
        t1 = views.view1.target_mask
        t2 = views.view2.target_mask
        assert not (t1 & t2).any()                       # disjoint
        assert np.array_equal(t1 | t2, obs)              # cover the visible set
        assert np.array_equal(views.view1.cond_mask, t2)  # roles swapped
        assert np.array_equal(views.view2.cond_mask, t1)


def test_views_partition_excludes_eval_cells():
    obs = np.ones((4, 3), dtype=np.uint8)
    eval_mask = np.zeros_like(obs)
    eval_mask[1, 1] = 1
    w = window_from_masks(obs, eval_mask)
    m = np.zeros_like(obs)
    m[0, 0] = 1
    views = complementary_views(w, m)
    visible = w.conditioning_mask
    assert np.array_equal(views.view1.target_mask | views.view2.target_mask, visible)
    # the held-out cell belongs to neither view
    assert views.view1.target_mask[1, 1] == 0 and views.view2.target_mask[1, 1] == 0
    # and its value must not leak into view inputs
    assert views.view1.values[1, 1] == 0.0


def test_views_reject_mask_outside_visible():
    obs = np.zeros((2, 2), dtype=np.uint8)
    obs[0, 0] = 1
    w = window_from_masks(obs)
    m = np.ones((2, 2), dtype=np.uint8)
    with pytest.raises(ValidationError, match="exceeds the visible"):
        complementary_views(w, m)


def test_view_values_expose_roles():
    obs = np.ones((2, 2), dtype=np.uint8)
    vals = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = window_from_masks(obs, values=vals)
    m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    views = complementary_views(w, m)
    assert views.view1.target_values.tolist() == [[1.0, 0.0], [0.0, 4.0]]
    assert views.view1.cond_values.tolist() == [[0.0, 2.0], [3.0, 0.0]]


@given(seed=st.integers(min_value=0, max_value=10_000))
@settings(max_examples=250, deadline=None)
def test_views_partition_random_24x5(seed):
    """1000-ish random 24x5 windows with random observation patterns: the
    partition property holds for sampled masks of both kinds."""
    rng = np.random.default_rng(seed)
    obs = (rng.random((24, 5)) > 0.3).astype(np.uint8)
    w = window_from_masks(obs)
    kind = "point" if seed % 2 == 0 else "block"
    m = sample_training_mask(w.conditioning_mask, MaskStrategy(kind=kind), rng)
    views = complementary_views(w, m)
    t1, t2 = views.view1.target_mask, views.view2.target_mask
    assert not (t1 & t2).any()
    assert np.array_equal(t1 | t2, w.conditioning_mask)
    assert not (t1 & ~obs & 1).any()


@given(seed=st.integers(min_value=0, max_value=10_000),
       ratio=st.floats(min_value=0.0, max_value=0.15))
@settings(max_examples=60, deadline=None)
def test_block_masks_stay_observed(seed, ratio):
    rng = np.random.default_rng(seed)
    obs = (rng.random((24, 5)) > 0.5).astype(np.uint8)
    m = sample_training_mask(obs, MaskStrategy(kind="block", fixed_ratio=ratio), rng)
    assert not (m & ~obs & 1).any()
