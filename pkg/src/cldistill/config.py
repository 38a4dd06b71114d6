"""Experiment configuration: JSON with kebab-case keys.

Every section maps onto a dataclass; unknown keys, wrong types and
cross-field violations are collected and reported together as a
:class:`~cldistill.errors.ConfigError`.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import base_class_count
from .distillation import DistillConfig
from .errors import ConfigError
from .weighting import WeightingConfig


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 8
    dim: int = 16
    samples_per_class: int = 100
    class_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0
    train_images: typing.Optional[str] = None
    train_labels: typing.Optional[str] = None
    test_images: typing.Optional[str] = None
    test_labels: typing.Optional[str] = None
    train_manifest: typing.Optional[str] = None
    test_manifest: typing.Optional[str] = None


@dataclass
class ModelConfig:
    hidden_dims: typing.List[int] = field(default_factory=lambda: [64, 32])
    cosine_head: bool = False
    cosine_scale: float = 10.0


@dataclass
class EvalConfig:
    flatness_sigmas: typing.List[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05])
    draws_per_sigma: int = 20
    antithetic: bool = True
    flatness_seed: int = 12345


@dataclass
class ProtocolConfig:
    total_classes: int = 8
    base_fraction: float = 0.5
    num_increments: int = 4
    epochs_base: int = 30
    epochs_inc: int = 20
    lr_base: float = 0.1
    lr_inc: float = 0.01
    lr_milestones_base: typing.List[int] = field(default_factory=list)
    lr_milestones_inc: typing.List[int] = field(default_factory=list)
    lr_decay: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    class_order_seed: typing.Optional[int] = None
    cls_scope: str = "all"
    replay_fraction: typing.Optional[float] = None
    exemplar_budget: int = 20
    distill: DistillConfig = field(default_factory=DistillConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @property
    def base_classes(self) -> int:
        return base_class_count(self.total_classes, self.base_fraction)

    def to_dict(self) -> dict:
        return to_kebab_dict(self)

    def replace(self, **changes) -> "ProtocolConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)


# Training budget of the original large-scale protocol (CIFAR-style).
LARGE_SCALE_PRESET = {
    "epochs-base": 70,
    "epochs-inc": 40,
    "lr-base": 0.1,
    "lr-inc": 0.01,
    "lr-milestones-base": [30, 60],
    "lr-milestones-inc": [25, 35],
    "batch-size": 128,
    "momentum": 0.9,
    "weight-decay": 1e-4,
    "exemplar-budget": 20,
    "distill": {"temperature": 2.0},
    "weighting": {"lambda-base": 20.0},
}


# Desk-scale forgetting benchmark: 8 blob classes, a 4-class base task and
# four one-class increments, a 2-hidden-layer MLP with a 4-wide feature
# bottleneck and 5 exemplars per class. Seeds set both data and training.
BENCHMARK_PRESET = {
    "total-classes": 8,
    "base-fraction": 0.5,
    "num-increments": 4,
    "epochs-base": 30,
    "epochs-inc": 30,
    "lr-base": 0.1,
    "lr-inc": 0.1,
    "exemplar-budget": 5,
    "model": {"hidden-dims": [16, 4], "cosine-head": True},
    "distill": {"variant": "rdkd", "temperature": 4.0},
    "weighting": {"lambda-base": 5.0, "normalize-features": True},
    "dataset": {
        "kind": "blobs",
        "num-classes": 8,
        "dim": 16,
        "samples-per-class": 100,
        "class-separation": 2.5,
        "noise-sigma": 2.0,
        "seed": 0,
    },
}

# Compression benchmark: same data and distillation settings, one narrow
# hidden layer for the student; the teacher is a [128, 64] MLP.
COMPRESS_PRESET = copy.deepcopy(BENCHMARK_PRESET)
COMPRESS_PRESET["model"] = {"hidden-dims": [8], "cosine-head": True}
COMPRESS_TEACHER_DIMS = [128, 64]


def _kebab(name: str) -> str:
    return name.replace("_", "-")


def to_kebab_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[_kebab(f.name)] = to_kebab_dict(value) if dataclasses.is_dataclass(value) else copy.deepcopy(value)
    return out


def _check_type(value, hint, path: str, problems: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _check_type(value, inner, path, problems)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return None
        return [_check_type(v, args[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw, path: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{path or 'config'}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    fields = {_kebab(f.name): f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            problems.append(f"{where}: unknown key")
            continue
        f = fields[key]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, where, problems)
        else:
            kwargs[f.name] = _check_type(value, hint, where, problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or 'config'}: {exc}")
        return cls()


def _cross_checks(cfg: ProtocolConfig, problems: list[str]) -> None:
    if cfg.total_classes < 2:
        problems.append("total-classes: need at least 2 classes")
    if not 0 < cfg.base_fraction <= 1:
        problems.append("base-fraction: must lie in (0, 1]")
    base = cfg.base_classes
    rest = cfg.total_classes - base
    if base < 1:
        problems.append("base-fraction: base task would be empty")
    if cfg.num_increments < 0:
        problems.append("num-increments: must be non-negative")
    elif cfg.num_increments == 0 and rest:
        problems.append(f"num-increments: 0 increments leave {rest} classes unassigned")
    elif cfg.num_increments and rest % cfg.num_increments:
        problems.append(
            f"num-increments: {cfg.num_increments} does not divide the {rest} non-base classes"
        )
    for name in ("epochs_base", "epochs_inc", "batch_size"):
        if getattr(cfg, name) < 1:
            problems.append(f"{_kebab(name)}: must be at least 1")
    for name in ("lr_base", "lr_inc"):
        if not getattr(cfg, name) > 0:
            problems.append(f"{_kebab(name)}: must be positive")
    for name, epochs in (("lr_milestones_base", cfg.epochs_base), ("lr_milestones_inc", cfg.epochs_inc)):
        ms = getattr(cfg, name)
        if any(not isinstance(m, int) or m < 1 or m >= epochs for m in ms):
            problems.append(f"{_kebab(name)}: every milestone must lie in [1, {epochs})")
        if list(ms) != sorted(set(ms)):
            problems.append(f"{_kebab(name)}: milestones must be strictly increasing")
    if not 0 < cfg.lr_decay <= 1:
        problems.append("lr-decay: must lie in (0, 1]")
    if not 0 <= cfg.momentum < 1:
        problems.append("momentum: must lie in [0, 1)")
    if cfg.weight_decay < 0:
        problems.append("weight-decay: must be non-negative")
    if cfg.exemplar_budget < 1:
        problems.append("exemplar-budget: must be at least 1")
    if cfg.cls_scope not in ("all", "new"):
        problems.append("cls-scope: must be 'all' or 'new'")
    if cfg.replay_fraction is not None and not 0 <= cfg.replay_fraction < 1:
        problems.append("replay-fraction: must lie in [0, 1)")
    if not cfg.model.hidden_dims or min(cfg.model.hidden_dims) < 1:
        problems.append("model.hidden-dims: need at least one positive width")
    if cfg.evaluation.draws_per_sigma < 1:
        problems.append("evaluation.draws-per-sigma: must be at least 1")
    sig = cfg.evaluation.flatness_sigmas
    if sig and (sig[0] != 0 or any(b <= a for a, b in zip(sig, sig[1:]))):
        problems.append("evaluation.flatness-sigmas: must start at 0 and increase strictly")
    ds = cfg.dataset
    if ds.kind == "blobs":
        if ds.num_classes != cfg.total_classes:
            problems.append(
                f"dataset.num-classes: {ds.num_classes} differs from total-classes {cfg.total_classes}"
            )
        if ds.samples_per_class < 2:
            problems.append("dataset.samples-per-class: must be at least 2")
    elif ds.kind == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            value = getattr(ds, name)
            if not value:
                problems.append(f"dataset.{_kebab(name)}: required for idx datasets")
            elif not Path(value).exists():
                problems.append(f"dataset.{_kebab(name)}: file not found: {value}")
    elif ds.kind == "cache":
        for name in ("train_manifest", "test_manifest"):
            value = getattr(ds, name)
            if not value:
                problems.append(f"dataset.{_kebab(name)}: required for cached datasets")
            elif not Path(value).exists():
                problems.append(f"dataset.{_kebab(name)}: file not found: {value}")
    else:
        problems.append(f"dataset.kind: unknown dataset kind {ds.kind!r} (blobs, idx, cache)")


def from_dict(raw: dict) -> ProtocolConfig:
    problems: list[str] = []
    cfg = _build(ProtocolConfig, raw, "", problems)
    try:
        _cross_checks(cfg, problems)
    except (TypeError, ValueError):
        # a mistyped field already produced a problem line; skip derived checks
        if not problems:
            raise
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw_value = text.split("=", 1)
    path = [_kebab(p) for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r}: empty key")
    try:
        value = json.loads(raw_value)
    except ValueError:
        value = raw_value
    return path, value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return raw


def load_raw(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def load_config(path, overrides=()) -> ProtocolConfig:
    return from_dict(apply_overrides(load_raw(path), overrides))
