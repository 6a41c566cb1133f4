"""Typed run configuration: a small YAML tree with an `include` mechanism,
strict unknown-key rejection, dotted-path overrides, and round-trip
serialization so every output directory carries its effective config.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

import yaml

from .errors import ConfigError

SPLIT_NAMES = ("train", "val", "test")
ABLATIONS = ("none", "wo_intra", "wo_inter", "wo_cons")


@dataclass
class DatasetBlock:
    path: str = ""
    window_length: int = 24
    stride: int | None = None          # None -> non-overlapping (= window_length)
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    date_ranges: dict | None = None    # optional {split: [start, end)} override

    def validate(self):
        if self.window_length < 2:
            raise ConfigError(f"dataset.window_length must be >= 2, got {self.window_length}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("dataset.stride must be >= 1")


@dataclass
class MaskBlock:
    pattern: str = "point"
    point_ratio: float = 0.2
    block_point_ratio: float = 0.05
    block_start_prob: float = 0.0015
    block_len_min: int | None = None   # None -> L // 2
    block_len_max: int | None = None   # None -> 2 * L
    seed: int = 0

    def validate(self):
        if self.pattern not in ("point", "block"):
            raise ConfigError(f"mask.pattern must be point or block, got {self.pattern!r}")
        if not 0.0 <= self.point_ratio <= 1.0:
            raise ConfigError(f"mask.point_ratio must lie in [0, 1], got {self.point_ratio}")
        if not 0.0 <= self.block_point_ratio <= 1.0:
            raise ConfigError("mask.block_point_ratio must lie in [0, 1]")
        if not 0.0 <= self.block_start_prob <= 1.0:
            raise ConfigError("mask.block_start_prob must lie in [0, 1]")


@dataclass
class DiffusionBlock:
    num_steps: int = 50
    beta_1: float = 1e-4
    beta_K: float = 0.2
    shape: str = "quadratic"

    def validate(self):
        if self.num_steps < 1:
            raise ConfigError("diffusion.num_steps must be >= 1")
        if self.shape not in ("linear", "quadratic"):
            raise ConfigError(f"diffusion.shape must be linear or quadratic, got {self.shape!r}")
        if not 0 < self.beta_1 <= self.beta_K < 1:
            raise ConfigError("diffusion betas must satisfy 0 < beta_1 <= beta_K < 1")

    def params(self) -> dict:
        return asdict(self)


@dataclass
class ModelBlock:
    d: int = 64
    num_layers: int = 2
    num_heads: int = 8
    dropout: float = 0.0
    ff_dim: int | None = None
    cond_fusion: str = "concat"
    contrastive_pool: str = "mean"


@dataclass
class TrainBlock:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    lambda_cl: float = 0.1
    tau: float = 0.1
    intra_on: bool = True
    inter_on: bool = True
    both_views: bool = True
    objective: str = "predict_noise"
    reduction: str = "mean"
    grad_clip: float | None = None
    patience: int | None = 10

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.tau <= 0:
            raise ConfigError("train.tau must be positive")


@dataclass
class InferBlock:
    num_samples: int = 100
    seed: int = 0
    batch_windows: int | None = None

    def validate(self):
        if self.num_samples < 1:
            raise ConfigError("infer.num_samples must be >= 1")


@dataclass
class OutputBlock:
    dir: str = "runs/run"


@dataclass
class RunConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    mask: MaskBlock = field(default_factory=MaskBlock)
    diffusion: DiffusionBlock = field(default_factory=DiffusionBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    infer: InferBlock = field(default_factory=InferBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def validate(self) -> "RunConfig":
        for name in ("dataset", "mask", "diffusion", "train", "infer"):
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, ftype, key: str):
    """Best-effort scalar coercion with explicit failures."""
    if value is None:
        return None
    origin = getattr(ftype, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key} expects a list")
        return tuple(float(v) for v in value)
    if origin is dict or ftype is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key} expects a mapping")
        return dict(value)
    # unwrap X | None annotations
    args = getattr(ftype, "__args__", None)
    if args is not None:
        real = [a for a in args if a is not type(None)]
        if len(real) == 1:
            return _coerce(value, real[0], key)
        return value
    if ftype in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key} expects an integer, got {value!r}")
        return value
    if ftype in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key} expects a number, got {value!r}")
        return float(value)
    if ftype in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key} expects true/false, got {value!r}")
        return value
    if ftype in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key} expects a string, got {value!r}")
        return value
    return value


def _build_block(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}.{sorted(unknown)[0]}")
    hints = get_type_hints(cls)
    kwargs = {}
    for name in known:
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], f"{prefix}.{name}")
    return cls(**kwargs)


_BLOCKS = {
    "dataset": DatasetBlock,
    "mask": MaskBlock,
    "diffusion": DiffusionBlock,
    "model": ModelBlock,
    "train": TrainBlock,
    "infer": InferBlock,
    "output": OutputBlock,
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _load_tree(path: Path, seen: frozenset = frozenset()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"config include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root of {path} must be a mapping")
    include = data.pop("include", None)
    if include is not None:
        includes = include if isinstance(include, list) else [include]
        base: dict = {}
        for inc in includes:
            base = _deep_merge(base, _load_tree(path.parent / str(inc), seen | {path}))
        data = _deep_merge(base, data)
    return data


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_BLOCKS)
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
    blocks = {name: _build_block(cls, data.get(name, {}), name) for name, cls in _BLOCKS.items()}
    return RunConfig(**blocks).validate()


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value pairs (values parsed as YAML scalars)."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = out
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    data = _load_tree(Path(path))
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def default_config() -> RunConfig:
    return RunConfig()


def save_effective_config(config: RunConfig, path) -> None:
    tree = config.to_dict()
    tree["dataset"]["split_fractions"] = list(tree["dataset"]["split_fractions"])
    Path(path).write_text(yaml.safe_dump(tree, sort_keys=True))


def resolve_seed(config_seed: int) -> int:
    """The MTSCI_SEED environment variable wins over any configured seed."""
    env = os.environ.get("MTSCI_SEED")
    if env is None:
        return config_seed
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"MTSCI_SEED must be an integer, got {env!r}") from exc


def split_sim_seed(master_seed: int, split: str) -> int:
    """Per-split simulation stream.

    Window start indices restart at zero in every split, so reusing one seed
    across splits would hide the same cells in each; fold the split name in.
    """
    if split not in SPLIT_NAMES:
        raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {split!r}")
    import numpy as np

    tag = SPLIT_NAMES.index(split) + 1
    return int(np.random.SeedSequence([master_seed, 0x53494D, tag]).generate_state(1)[0])
