"""Evaluation quantities and analysis probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .distillation import classification_loss


@dataclass
class AccuracyMatrix:
    """``acc[t][j]``: accuracy (%) after step t on task j's test data, j <= t.

    ``seen[t]`` is the accuracy over every class seen up to step t.
    """

    acc: list[list[float]] = field(default_factory=list)
    seen: list[float] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.seen)

    def add_step(self, task_accs: Sequence[float], seen_acc: float) -> None:
        if len(task_accs) != len(self.acc) + 1:
            raise ValueError(f"step {len(self.acc)} must report {len(self.acc) + 1} task accuracies")
        self.acc.append([float(a) for a in task_accs])
        self.seen.append(float(seen_acc))

    def validate(self) -> None:
        if not self.seen or len(self.acc) != len(self.seen):
            raise ValueError("accuracy matrix is incomplete")
        for t, row in enumerate(self.acc):
            if len(row) != t + 1:
                raise ValueError(f"row {t} has {len(row)} entries, expected {t + 1}")
            if any(not 0 <= a <= 100 for a in row) or not 0 <= self.seen[t] <= 100:
                raise ValueError(f"row {t} holds accuracies outside [0, 100]")

    def to_dict(self) -> dict:
        return {"acc": self.acc, "seen": self.seen}


@dataclass
class FlatnessCurve:
    sigmas: list[float]
    mean_loss: list[float]
    std_loss: list[float]

    def rows(self):
        return list(zip(self.sigmas, self.mean_loss, self.std_loss))

    def to_dict(self) -> dict:
        return {"sigma": self.sigmas, "mean-loss": self.mean_loss, "std-loss": self.std_loss}


def accuracy(model, inputs, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty sample set")
    return 100.0 * float(np.mean(model.predict(inputs) == labels))


def avg_incremental_accuracy(matrix: AccuracyMatrix) -> float:
    matrix.validate()
    return float(np.mean(matrix.seen))


def base_task_trace(matrix: AccuracyMatrix) -> list[float]:
    matrix.validate()
    return [row[0] for row in matrix.acc]


def stability_plasticity_split(model, tasks, step: int, inputs, labels) -> tuple[float, float]:
    """Accuracy on old-class and on step-``step`` class samples, argmax over all seen classes."""
    if step < 1:
        raise ValueError("the old/new split needs an incremental step (t >= 1)")
    labels = np.asarray(labels)
    old = [c for t in tasks[:step] for c in t.classes]
    new = list(tasks[step].classes)
    old_mask = np.isin(labels, old)
    new_mask = np.isin(labels, new)
    return accuracy(model, inputs[old_mask], labels[old_mask]), accuracy(model, inputs[new_mask], labels[new_mask])


def mean_ce_loss(model, inputs, labels, batch_size: int = 2048) -> float:
    """Mean cross-entropy over every registered class, for all given samples."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    cols = list(range(model.n_classes))
    total = 0.0
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            xb, yb = inputs[start : start + batch_size], labels[start : start + batch_size]
            loss = classification_loss(model.forward_logits(xb), cols, yb, model.class_registry)
            total += loss.item() * len(xb)
    return total / len(inputs)


def perturbation_sensitivity(
    model,
    inputs,
    labels,
    sigmas: Sequence[float],
    draws_per_sigma: int,
    rng: np.random.Generator,
    loss_fn: Callable | None = None,
    antithetic: bool = False,
) -> FlatnessCurve:
    """Mean training loss under i.i.d. N(0, sigma^2) noise on every parameter.

    The parameters are restored bit-exactly after each draw. With
    ``antithetic`` the draws come in (+noise, -noise) pairs, which keeps
    each draw's distribution but cancels the first-order term of the mean.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or sigmas[0] != 0 or any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigmas must start at 0 and increase strictly")
    loss_fn = loss_fn or mean_ce_loss
    params = model.parameters()
    saved = [p.data.copy() for p in params]
    means, stds = [], []
    try:
        for sigma in sigmas:
            if sigma == 0:
                base = loss_fn(model, inputs, labels)
                means.append(base)
                stds.append(0.0)
                continue
            losses = []
            noise = None
            for d in range(draws_per_sigma):
                if antithetic and d % 2 == 1:
                    noise = [-n for n in noise]
                else:
                    noise = [rng.normal(0.0, sigma, size=s.shape) for s in saved]
                for p, s, n in zip(params, saved, noise):
                    p.data[...] = s + n
                losses.append(loss_fn(model, inputs, labels))
                for p, s in zip(params, saved):
                    p.data[...] = s
            means.append(float(np.mean(losses)))
            stds.append(float(np.std(losses)))
    finally:
        for p, s in zip(params, saved):
            p.data[...] = s
    return FlatnessCurve(sigmas, means, stds)


def aggregate_orders(values) -> tuple[float, float]:
    """Sample mean and (n-1)-normalised variance of average incremental accuracy.

    Accepts plain numbers or objects with an ``avg_incremental_accuracy`` attribute.
    """
    xs = [float(getattr(v, "avg_incremental_accuracy", v)) for v in values]
    if len(xs) < 2:
        raise ValueError("need at least two runs to aggregate")
    mean = math.fsum(xs) / len(xs)
    var = math.fsum((x - mean) ** 2 for x in xs) / (len(xs) - 1)
    return mean, var
