"""Data pipeline: load raw CSV series, normalize, split, cut windows,
simulate evaluation missing patterns, and pair windows with their adjacent
context window.

Values at unobserved cells are stored as 0.0 so masked arithmetic stays
NaN-free; every consumer must gate on the masks, never on stored content.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

STD_FLOOR = 1e-8


@dataclass
class SeriesTable:
    """A raw or normalized multivariate series with its observation mask."""

    values: np.ndarray          # (T, C) float64
    native_mask: np.ndarray     # (T, C) uint8, 1 = observed
    timestamps: np.ndarray      # (T,) datetime64[ns], strictly increasing, constant step
    feature_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.native_mask = np.asarray(self.native_mask, dtype=np.uint8)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        if self.values.ndim != 2:
            raise ValidationError(f"values must be 2-D, got shape {self.values.shape}")
        if self.native_mask.shape != self.values.shape:
            raise ValidationError("native_mask shape must match values shape")
        if not np.isin(self.native_mask, (0, 1)).all():
            raise ValidationError("native_mask entries must be exactly 0 or 1")
        if len(self.timestamps) != self.values.shape[0]:
            raise ValidationError("timestamps length must match number of rows")
        if len(self.feature_names) != self.values.shape[1]:
            raise ValidationError("feature_names length must match number of columns")
        if len(self.timestamps) >= 2:
            deltas = np.diff(self.timestamps)
            if not (deltas > np.timedelta64(0)).all():
                bad = int(np.argmin(deltas > np.timedelta64(0)))
                raise ValidationError(
                    f"timestamps must be strictly increasing (violation at row {bad + 1})"
                )
            if not (deltas == deltas[0]).all():
                bad = int(np.argmin(deltas == deltas[0]))
                raise ValidationError(
                    f"timestamps must be evenly spaced (violation at row {bad + 1})"
                )

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]


@dataclass
class Window:
    """One length-L slice of a series.

    eval_mask marks originally observed cells that were artificially hidden
    to serve as ground-truth evaluation targets; it is always a subset of
    obs_mask.
    """

    values: np.ndarray      # (L, C)
    obs_mask: np.ndarray    # (L, C) uint8
    eval_mask: np.ndarray   # (L, C) uint8
    start_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.obs_mask = np.asarray(self.obs_mask, dtype=np.uint8)
        self.eval_mask = np.asarray(self.eval_mask, dtype=np.uint8)
        if self.obs_mask.shape != self.values.shape or self.eval_mask.shape != self.values.shape:
            raise ValidationError("window masks must match the values shape")
        if (self.eval_mask & ~self.obs_mask & 1).any():
            raise ValidationError("eval_mask may only cover observed cells")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    @property
    def conditioning_mask(self) -> np.ndarray:
        """Cells whose values may be read during training or inference."""
        return (self.obs_mask & ~self.eval_mask & 1).astype(np.uint8)


@dataclass
class WindowPair:
    sampled: Window
    context: Window | None
    has_context: bool

    def __post_init__(self):
        if self.has_context:
            if self.context is None:
                raise ValidationError("has_context=True requires a context window")
            expected = self.sampled.start_index + self.sampled.length
            if self.context.start_index != expected:
                raise ValidationError(
                    f"context must start at {expected}, got {self.context.start_index}"
                )


@dataclass
class NormStats:
    """Per-feature z-score parameters fit on observed training cells."""

    mean: np.ndarray
    std: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if (self.std < STD_FLOOR).any():
            raise ValidationError(f"std entries must be >= {STD_FLOOR}")

    def apply_values(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert_values(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def apply(self, series: SeriesTable) -> SeriesTable:
        normalized = self.apply_values(series.values) * series.native_mask
        return replace(series, values=normalized)

    def invert(self, series: SeriesTable) -> SeriesTable:
        raw = self.invert_values(series.values) * series.native_mask
        return replace(series, values=raw)


@dataclass(frozen=True)
class CsvFormat:
    """Documented CSV layout: header of feature names, first column an
    ISO-8601 timestamp, missing cells empty or a sentinel token."""

    missing_tokens: tuple[str, ...] = ("", "nan", "NaN", "NA", "null")
    delimiter: str = ","


def _parse_timestamp(token: str, line_no: int) -> np.datetime64:
    try:
        return np.datetime64(datetime.fromisoformat(token.strip().replace("Z", "+00:00")))
    except ValueError as exc:
        raise ParseError(f"line {line_no}: bad timestamp {token!r}: {exc}") from exc


def load_series(source_path, format_spec: CsvFormat | None = None) -> SeriesTable:
    """Read the documented CSV layout into a SeriesTable."""
    fmt = format_spec or CsvFormat()
    missing = set(fmt.missing_tokens)
    with open(source_path, newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{source_path}: empty file") from None
        if len(header) < 2:
            raise ParseError(f"{source_path}: header must contain a timestamp column and at least one feature")
        feature_names = [h.strip() for h in header[1:]]
        n_cols = len(header)
        timestamps, rows, masks = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise ParseError(
                    f"line {line_no}: expected {n_cols} columns, got {len(row)}"
                )
            timestamps.append(_parse_timestamp(row[0], line_no))
            vals = np.zeros(n_cols - 1, dtype=np.float64)
            mask = np.ones(n_cols - 1, dtype=np.uint8)
            for j, tok in enumerate(row[1:]):
                tok = tok.strip()
                if tok in missing:
                    mask[j] = 0
                else:
                    try:
                        vals[j] = float(tok)
                    except ValueError:
                        raise ParseError(
                            f"line {line_no}: column {feature_names[j]!r}: "
                            f"not a number: {tok!r}"
                        ) from None
            rows.append(vals)
            masks.append(mask)
    if not rows:
        raise ParseError(f"{source_path}: no data rows")
    return SeriesTable(
        values=np.stack(rows),
        native_mask=np.stack(masks),
        timestamps=np.array(timestamps, dtype="datetime64[ns]"),
        feature_names=feature_names,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Either contiguous time-ordered fractions or explicit date ranges.

    Date ranges are half-open [start, end) ISO-8601 strings keyed by split
    name; they may appear in any time order (the ETT convention places the
    test months first) but must not overlap.
    """

    fractions: tuple[float, float, float] | None = (0.7, 0.1, 0.2)
    date_ranges: dict[str, tuple[str, str]] | None = None

    def __post_init__(self):
        if self.date_ranges is not None:
            missing = {"train", "val", "test"} - set(self.date_ranges)
            if missing:
                raise ConfigError(f"date_ranges missing splits: {sorted(missing)}")
        elif self.fractions is not None:
            if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
                raise ConfigError("fractions must be three non-negative reals")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ConfigError(
                    f"fractions must sum to 1 (got {sum(self.fractions)!r})"
                )
        else:
            raise ConfigError("split spec needs either fractions or date_ranges")


def _slice_series(series: SeriesTable, lo: int, hi: int) -> SeriesTable:
    return SeriesTable(
        values=series.values[lo:hi],
        native_mask=series.native_mask[lo:hi],
        timestamps=series.timestamps[lo:hi],
        feature_names=series.feature_names,
    )


def split_series(series: SeriesTable, spec: SplitSpec) -> tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Cut three disjoint contiguous segments (train, val, test)."""
    if spec.date_ranges is not None:
        bounds = {}
        for name, (start, end) in spec.date_ranges.items():
            lo = np.datetime64(datetime.fromisoformat(start))
            hi = np.datetime64(datetime.fromisoformat(end))
            if lo >= hi:
                raise ConfigError(f"split {name!r}: start {start} not before end {end}")
            bounds[name] = (lo, hi)
        names = sorted(bounds, key=lambda n: bounds[n][0])
        for a, b in zip(names, names[1:]):
            if bounds[a][1] > bounds[b][0]:
                raise ConfigError(f"date ranges {a!r} and {b!r} overlap")
        parts = {}
        for name, (lo, hi) in bounds.items():
            sel = (series.timestamps >= lo) & (series.timestamps < hi)
            idx = np.flatnonzero(sel)
            if idx.size == 0:
                raise ConfigError(f"split {name!r} selects no rows")
            parts[name] = _slice_series(series, int(idx[0]), int(idx[-1]) + 1)
        return parts["train"], parts["val"], parts["test"]

    total = series.num_steps
    n_train = int(total * spec.fractions[0])
    n_val = int(total * spec.fractions[1])
    train = _slice_series(series, 0, n_train)
    val = _slice_series(series, n_train, n_train + n_val)
    test = _slice_series(series, n_train + n_val, total)
    return train, val, test


def fit_normalizer(train: SeriesTable) -> NormStats:
    """Per-feature mean/std (population) over observed training cells only."""
    mask = train.native_mask.astype(bool)
    counts = mask.sum(axis=0)
    if (counts == 0).any():
        bad = train.feature_names[int(np.argmin(counts > 0))]
        raise ValidationError(f"feature {bad!r} has no observed training cells")
    vals = np.where(mask, train.values, 0.0)
    mean = vals.sum(axis=0) / counts
    var = ((vals - mean) ** 2 * mask).sum(axis=0) / counts
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(mean=mean, std=std, feature_names=list(train.feature_names))


def make_windows(series: SeriesTable, length: int, stride: int | None = None) -> list[Window]:
    """Cut non-overlapping (by default) windows; trailing remainder dropped."""
    if length < 2:
        raise ConfigError(f"window length must be >= 2, got {length}")
    stride = length if stride is None else stride
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if series.num_steps < length:
        warnings.warn(
            f"series of length {series.num_steps} is shorter than window length {length}; "
            "no windows produced"
        )
        return []
    windows = []
    for start in range(0, series.num_steps - length + 1, stride):
        windows.append(
            Window(
                values=series.values[start : start + length].copy(),
                obs_mask=series.native_mask[start : start + length].copy(),
                eval_mask=np.zeros((length, series.num_features), dtype=np.uint8),
                start_index=start,
            )
        )
    return windows


@dataclass(frozen=True)
class MissingSpec:
    """Evaluation missing-pattern parameters.

    point: each observed cell hidden independently with point_ratio.
    block: each observed cell hidden with block_point_ratio, and per
    (time-step, feature) position a block of uniform length in
    [len_min, len_max] starts with block_start_prob, masking that feature
    forward in time (truncated at the window edge). Block lengths default
    to [L/2, 2L].
    """

    pattern: str = "point"
    point_ratio: float = 0.2
    block_point_ratio: float = 0.05
    block_start_prob: float = 0.0015
    block_len_min: int | None = None
    block_len_max: int | None = None

    def __post_init__(self):
        if self.pattern not in ("point", "block"):
            raise ConfigError(f"pattern must be 'point' or 'block', got {self.pattern!r}")
        for name in ("point_ratio", "block_point_ratio", "block_start_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    def block_bounds(self, length: int) -> tuple[int, int]:
        lo = self.block_len_min if self.block_len_min is not None else length // 2
        hi = self.block_len_max if self.block_len_max is not None else 2 * length
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad block length bounds [{lo}, {hi}]")
        return lo, hi


def _window_rng(seed: int, start_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, start_index]))


def simulate_missing(windows: list[Window], spec: MissingSpec, seed: int) -> list[Window]:
    """Set eval_mask on a pseudo-random subset of observed cells.

    Pure in (windows, spec, seed): each window gets its own stream derived
    from (seed, start_index), so results do not depend on list order.
    """
    out = []
    for w in windows:
        rng = _window_rng(seed, w.start_index)
        obs = w.obs_mask.astype(bool)
        if spec.pattern == "point":
            hit = rng.random(w.values.shape) < spec.point_ratio
        else:
            hit = rng.random(w.values.shape) < spec.block_point_ratio
            lo, hi = spec.block_bounds(w.length)
            starts = rng.random(w.values.shape) < spec.block_start_prob
            lengths = rng.integers(lo, hi + 1, size=w.values.shape)
            for t, f in zip(*np.nonzero(starts)):
                hit[t : t + lengths[t, f], f] = True
        eval_mask = (hit & obs).astype(np.uint8)
        out.append(replace(w, eval_mask=eval_mask))
    return out


def pair_with_context(windows: list[Window]) -> list[WindowPair]:
    """Pair each window with its immediate successor when adjacent in time."""
    pairs = []
    for i, w in enumerate(windows):
        nxt = windows[i + 1] if i + 1 < len(windows) else None
        adjacent = nxt is not None and nxt.start_index == w.start_index + w.length
        pairs.append(WindowPair(sampled=w, context=nxt if adjacent else None, has_context=adjacent))
    return pairs


def conceal_eval_targets(window: Window) -> Window:
    """Drop the held-out ground truth so inference cannot read it."""
    visible = window.conditioning_mask
    return Window(
        values=window.values * visible,
        obs_mask=visible,
        eval_mask=np.zeros_like(visible),
        start_index=window.start_index,
    )


def sidecar_name(split: str, pattern: str, seed: int) -> str:
    return f"{split}.{pattern}.{seed}.mask"


def write_mask_sidecar(windows: list[Window], path) -> None:
    """Freeze eval masks to a CSV sidecar, one row per hidden cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "t", "feature"])
        for w in windows:
            for t, f in zip(*np.nonzero(w.eval_mask)):
                writer.writerow([w.start_index, int(t), int(f)])


def read_mask_sidecar(path) -> dict[int, list[tuple[int, int]]]:
    cells: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["window_start", "t", "feature"]:
            raise ParseError(f"{path}: not a mask sidecar (bad header {header!r})")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path} line {line_no}: expected 3 columns")
            start, t, f = (int(x) for x in row)
            cells.setdefault(start, []).append((t, f))
    return cells


def apply_mask_sidecar(windows: list[Window], cells: dict[int, list[tuple[int, int]]]) -> list[Window]:
    """Attach frozen eval masks to freshly cut windows."""
    known = {w.start_index for w in windows}
    unknown = set(cells) - known
    if unknown:
        raise ValidationError(f"sidecar refers to unknown window starts: {sorted(unknown)[:5]}")
    out = []
    for w in windows:
        eval_mask = np.zeros_like(w.eval_mask)
        for t, f in cells.get(w.start_index, ()):
            if not w.obs_mask[t, f]:
                raise ValidationError(
                    f"sidecar marks unobserved cell (window {w.start_index}, t={t}, feature={f})"
                )
            eval_mask[t, f] = 1
        out.append(replace(w, eval_mask=eval_mask))
    return out
