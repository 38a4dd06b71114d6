"""Adaptive distillation weight from class-count ratio and feature distance.

``lambda = lambda_base * sqrt(|old group| / |new classes|) * distance``
where ``distance`` is the Euclidean distance between the mean class-feature
vector of the old group and that of the new classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .taskpool import ClassGroup


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    mean_feature: np.ndarray
    sample_count: int


@dataclass
class WeightingConfig:
    lambda_base: float = 1.0
    ratio_enabled: bool = True
    similarity_enabled: bool = True
    normalize_features: bool = False

    def __post_init__(self):
        if not self.lambda_base > 0:
            raise ValueError(f"lambda_base must be positive, got {self.lambda_base}")

    @property
    def adaptive(self) -> bool:
        return self.ratio_enabled or self.similarity_enabled


def compute_class_stats(model, inputs, class_id: int, batch_size: int = 1024) -> ClassStats:
    """Mean encoder feature over one class's training samples."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError(f"class {class_id} has no samples to compute statistics from")
    total = np.zeros(model.feature_dim)
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            total += model.extract_features(inputs[start : start + batch_size]).data.sum(axis=0)
    return ClassStats(int(class_id), total / len(inputs), len(inputs))


def ratio_term(old_count: int, new_count: int) -> float:
    if old_count < 1 or new_count < 1:
        raise ValueError(f"class counts must be positive, got {old_count} and {new_count}")
    return math.sqrt(old_count / new_count)


def _mean_vector(classes, stats: Mapping[int, ClassStats], normalize: bool) -> np.ndarray:
    missing = [c for c in classes if c not in stats]
    if missing:
        raise KeyError(f"no feature statistics for classes {missing}")
    vecs = np.stack([stats[c].mean_feature for c in classes])
    if normalize:
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs / np.maximum(norms, 1e-12)
    return vecs.mean(axis=0)


def similarity_term(group, new_classes: Sequence[int], stats: Mapping[int, ClassStats], normalize: bool = False) -> float:
    """Euclidean distance between the group's and the new classes' mean feature vectors.

    Larger distance means less similar, which earns a larger weight.
    """
    old = group.classes if isinstance(group, ClassGroup) else list(group)
    if not old or not new_classes:
        raise ValueError("similarity needs non-empty old and new class sets")
    diff = _mean_vector(old, stats, normalize) - _mean_vector(list(new_classes), stats, normalize)
    return math.sqrt(float(np.dot(diff, diff)))


def compute_lambda(config: WeightingConfig, group, new_classes: Sequence[int], stats: Mapping[int, ClassStats] | None) -> float:
    lam = config.lambda_base
    old = group.classes if isinstance(group, ClassGroup) else list(group)
    if config.ratio_enabled:
        lam *= ratio_term(len(old), len(new_classes))
    if config.similarity_enabled:
        lam *= similarity_term(old, new_classes, stats or {}, normalize=config.normalize_features)
    return lam
