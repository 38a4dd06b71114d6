"""Per-class exemplar memory filled by herding."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError

STORE_BLOB = "exemplars.bin"
STORE_INDEX = "exemplars.json"
TIE_RTOL = 1e-12


def herding_select(features, budget: int) -> list[int]:
    """Greedy mean matching.

    At pick ``k`` the candidate whose inclusion brings the mean of the
    selected features closest to the full mean is taken. Ties go to the
    lowest index; distances within ``TIE_RTOL`` of the minimum count as
    ties, so rounding noise cannot reorder mathematically equal candidates.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be [n, d], got shape {feats.shape}")
    n = len(feats)
    if not 1 <= budget <= n:
        raise ValueError(f"budget {budget} outside [1, {n}]")
    target = feats.mean(axis=0)
    running = np.zeros(feats.shape[1])
    available = np.ones(n, dtype=bool)
    picks: list[int] = []
    for k in range(1, budget + 1):
        cand = (running + feats) / k
        dist = np.sum((target - cand) ** 2, axis=1)
        dist[~available] = np.inf
        best = dist.min()
        i = int(np.flatnonzero(dist <= best + TIE_RTOL * max(best, 1.0))[0])
        picks.append(i)
        available[i] = False
        running += feats[i]
    return picks


class ExemplarStore:
    def __init__(self, budget_per_class: int):
        if budget_per_class < 1:
            raise ValueError(f"exemplar budget must be at least 1, got {budget_per_class}")
        self.budget_per_class = int(budget_per_class)
        self.exemplars: dict[int, np.ndarray] = {}
        self._stacked = None

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def add_class(self, class_id: int, samples) -> None:
        samples = np.array(samples, dtype=np.float64)
        if len(samples) > self.budget_per_class:
            raise ValueError(f"{len(samples)} exemplars exceed the budget of {self.budget_per_class}")
        samples.setflags(write=False)
        self.exemplars[int(class_id)] = samples
        self._stacked = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All exemplars stacked in class order, with their labels."""
        if not self.exemplars:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        if self._stacked is None:
            xs = [self.exemplars[c] for c in self.classes]
            ys = [np.full(len(self.exemplars[c]), c, dtype=np.int64) for c in self.classes]
            self._stacked = (np.concatenate(xs), np.concatenate(ys))
        return self._stacked

    def dump(self, directory) -> None:
        directory = Path(directory)
        xs, ys = self.arrays()
        index, offset = [], 0
        for c in self.classes:
            count = len(self.exemplars[c])
            index.append({"class": c, "offset": offset, "count": count})
            offset += count
        meta = {
            "budget-per-class": self.budget_per_class,
            "dim": int(xs.shape[1]) if len(xs) else 0,
            "dtype": "float64-le",
            "classes": index,
        }
        (directory / STORE_BLOB).write_bytes(np.ascontiguousarray(xs, dtype="<f8").tobytes())
        (directory / STORE_INDEX).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "ExemplarStore":
        directory = Path(directory)
        meta = json.loads((directory / STORE_INDEX).read_text())
        raw = (directory / STORE_BLOB).read_bytes()
        dim = meta["dim"]
        total = sum(e["count"] for e in meta["classes"])
        if len(raw) != 8 * dim * total:
            raise FormatError(f"{STORE_BLOB}: expected {8 * dim * total} bytes, found {len(raw)}")
        data = np.frombuffer(raw, dtype="<f8").reshape(total, dim) if total else np.zeros((0, dim))
        store = cls(meta["budget-per-class"])
        for e in meta["classes"]:
            store.add_class(e["class"], data[e["offset"] : e["offset"] + e["count"]])
        return store


def update_store(store: ExemplarStore, task, model, inputs, labels) -> None:
    """Herd up to the budget for every class of a just-finished task."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    for c in task.classes:
        xs = inputs[labels == c]
        if len(xs) == 0:
            raise ValueError(f"no training samples for class {c}")
        with T.no_grad():
            feats = model.extract_features(xs).data
        picks = herding_select(feats, min(store.budget_per_class, len(xs)))
        store.add_class(c, xs[picks])


def replay_batch(store: ExemplarStore, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draw with replacement over every stored exemplar."""
    if len(store) == 0:
        raise ValueError("cannot replay from an empty exemplar store")
    xs, ys = store.arrays()
    idx = rng.integers(0, len(xs), size=size)
    return xs[idx], ys[idx]
