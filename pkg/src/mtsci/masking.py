"""Self-supervised training target masks and the complementary dual views.

The target mask m splits a window's visible cells into two views whose
imputation-target and conditioning roles are swapped; together the views'
targets partition the visible set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Window
from .errors import ConfigError, ValidationError

POINT_RATIO_MAX = 1.0
BLOCK_PROB_MAX = 0.15


@dataclass(frozen=True)
class MaskStrategy:
    """Per-window mask sampling parameters.

    The per-window ratio r is drawn uniformly from [ratio_min, ratio_max]
    each time a mask is sampled; fixed_ratio pins it instead (used by tests
    and ablations). Block target lengths are uniform integers in
    block_length_range, default [L/2, L].
    """

    kind: str = "point"
    ratio_min: float = 0.0
    ratio_max: float | None = None
    fixed_ratio: float | None = None
    block_length_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("point", "block"):
            raise ConfigError(f"mask kind must be 'point' or 'block', got {self.kind!r}")
        cap = POINT_RATIO_MAX if self.kind == "point" else BLOCK_PROB_MAX
        hi = cap if self.ratio_max is None else self.ratio_max
        object.__setattr__(self, "ratio_max", hi)
        for name, v in (("ratio_min", self.ratio_min), ("ratio_max", hi)):
            if not 0.0 <= v <= cap:
                raise ConfigError(f"{name}={v} outside [0, {cap}] for kind {self.kind!r}")
        if self.ratio_min > hi:
            raise ConfigError(f"ratio_min {self.ratio_min} exceeds ratio_max {hi}")
        if self.fixed_ratio is not None and not 0.0 <= self.fixed_ratio <= cap:
            raise ConfigError(f"fixed_ratio={self.fixed_ratio} outside [0, {cap}]")

    def draw_ratio(self, rng: np.random.Generator) -> float:
        if self.fixed_ratio is not None:
            return self.fixed_ratio
        return float(rng.uniform(self.ratio_min, self.ratio_max))

    def block_bounds(self, length: int) -> tuple[int, int]:
        lo, hi = self.block_length_range or (length // 2, length)
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad block length bounds [{lo}, {hi}]")
        return lo, hi


@dataclass
class TrainingView:
    """One complementary view: the window's values with a target/conditioning
    role assigned to each visible cell."""

    values: np.ndarray       # (L, C), visible cells only are meaningful
    target_mask: np.ndarray  # (L, C) uint8
    cond_mask: np.ndarray    # (L, C) uint8

    @property
    def target_values(self) -> np.ndarray:
        return self.values * self.target_mask

    @property
    def cond_values(self) -> np.ndarray:
        return self.values * self.cond_mask


@dataclass
class ComplementaryViews:
    view1: TrainingView
    view2: TrainingView
    m: np.ndarray


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_training_mask(obs_mask: np.ndarray, strategy: MaskStrategy, seed_or_rng) -> np.ndarray:
    """Sample the imputation-target mask m among observed cells.

    obs_mask must already exclude evaluation-held-out cells; those are
    unknown at training time and may never enter a view.
    """
    rng = _as_rng(seed_or_rng)
    obs = np.asarray(obs_mask).astype(bool)
    r = strategy.draw_ratio(rng)
    if strategy.kind == "point":
        hit = rng.random(obs.shape) < r
    else:
        length = obs.shape[0]
        lo, hi = strategy.block_bounds(length)
        hit = np.zeros(obs.shape, dtype=bool)
        starts = rng.random(obs.shape) < r
        lengths = rng.integers(lo, hi + 1, size=obs.shape)
        for t, f in zip(*np.nonzero(starts)):
            hit[t : t + lengths[t, f], f] = True
    return (hit & obs).astype(np.uint8)


def complementary_views(window: Window, m: np.ndarray) -> ComplementaryViews:
    """Split the window's visible cells into two role-swapped views.

    view1 treats m as imputation targets and the remaining visible cells as
    conditioning; view2 swaps the roles. The two target sets partition the
    visible set.
    """
    m = np.asarray(m, dtype=np.uint8)
    visible = window.conditioning_mask
    if (m & ~visible & 1).any():
        raise ValidationError("target mask m exceeds the visible (observed, non-held-out) set")
    rest = (visible & ~m & 1).astype(np.uint8)
    values = window.values * visible
    return ComplementaryViews(
        view1=TrainingView(values=values, target_mask=m, cond_mask=rest),
        view2=TrainingView(values=values, target_mask=rest, cond_mask=m),
        m=m,
    )
