"""Classification and logit-distillation losses.

All distillation terms share one primitive: a temperature-softened KL
divergence between the teacher and student softmax over a chosen set of
logit columns. The variants differ only in which column groups they sum
over:

* ``gkd``  - one group holding every old class
* ``tkd``  - one group per prior task
* ``fdkd`` - every non-empty combination of prior tasks
* ``rdkd`` - one combination drawn uniformly per call

Teacher logits are always treated as constants. Losses are averaged over
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .taskpool import ClassGroup, TaskPool, TaskSpec, enumerate_groups, sample_group
from .tensor import Tensor

EPS = 1e-12
VARIANTS = ("none", "gkd", "tkd", "fdkd", "rdkd")
KL_DIRECTIONS = ("teacher-student", "student-teacher")


@dataclass
class DistillConfig:
    variant: str = "rdkd"
    temperature: float = 2.0
    # "teacher-student" is sum q*ln(q/p) with q the teacher; "student-teacher" swaps them
    kl_direction: str = "teacher-student"
    tau_squared: bool = False
    kd_on_replay: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distillation variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl direction must be one of {KL_DIRECTIONS}")


@dataclass
class LossValue:
    value: Tensor
    breakdown: dict = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


def softmax_temp(logits, temperature: float) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return T.softmax(T.scale(T.as_tensor(logits), 1.0 / temperature))


def kl_div(p, q) -> Tensor:
    """Batch mean of ``sum_i p_i * ln(p_i / q_i)``; logs are floored at 1e-12.

    Either argument may carry gradient.
    """
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl_div needs matching [batch, k] rows, got {p.shape} and {q.shape}")
    per_elem = T.mul(p, T.sub(T.log(p, EPS), T.log(q, EPS)))
    return T.scale(T.sum(per_elem), 1.0 / p.shape[0])


def _teacher_array(teacher) -> np.ndarray:
    return teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)


def group_kl(
    student: Tensor,
    teacher,
    columns: Sequence[int],
    temperature: float,
    direction: str = "teacher-student",
) -> Tensor:
    """KL term for one logit group, batch-averaged."""
    columns = list(columns)
    if not columns:
        raise ValueError("distillation group has no columns")
    t_arr = _teacher_array(teacher)
    if t_arr.shape[0] != student.shape[0]:
        raise ShapeError(f"teacher batch {t_arr.shape[0]} differs from student batch {student.shape[0]}")
    n = student.shape[0]
    s_log = T.log_softmax(T.take_columns(student, columns), 1.0 / temperature)
    z = t_arr[:, columns] * (1.0 / temperature)
    # same arithmetic as tensor.log_softmax, so identical logits cancel exactly
    z = z - np.maximum.reduce(z, axis=1, keepdims=True)
    t_log = z - np.log(np.add.reduce(np.exp(z), axis=1, keepdims=True))
    # log-softmax is finite everywhere, so no floor is needed on either side
    t_prob = np.exp(t_log)
    if direction == "teacher-student":
        # sum q (ln q - ln p); the ln q part is constant
        const = float(np.add.reduce(t_prob * t_log, axis=None))
        cross = T.weighted_sum(s_log, -t_prob)
        return T.scale(T.add(cross, const), 1.0 / n)
    if direction == "student-teacher":
        p = T.exp(s_log)
        return T.scale(T.sum(T.mul(p, T.sub(s_log, Tensor(t_log)))), 1.0 / n)
    raise ValueError(f"unknown kl direction {direction!r}")


def _maybe_tau2(loss: Tensor, temperature: float, tau_squared: bool) -> Tensor:
    return T.scale(loss, temperature * temperature) if tau_squared else loss


def _columns_for(classes, registry) -> list[int]:
    if registry is None:
        return list(classes)
    lookup = {c: i for i, c in enumerate(registry)}
    try:
        return [lookup[c] for c in classes]
    except KeyError as exc:
        raise KeyError(f"class {exc.args[0]} has no logit column") from None


def classification_loss(logits: Tensor, columns: Sequence[int], labels, registry=None) -> Tensor:
    """Cross-entropy of the softmax restricted to ``columns``.

    ``labels`` are class ids; ``registry`` maps columns to class ids
    (identity when omitted).
    """
    columns = list(columns)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {logits.shape[0]}")
    col_classes = [registry[c] for c in columns] if registry is not None else columns
    pos = {c: i for i, c in enumerate(col_classes)}
    try:
        targets = np.array([pos[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is outside the modelled classes {col_classes}") from None
    logp = T.log_softmax(T.take_columns(logits, columns))
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(targets)), targets] = -1.0 / len(targets)
    return T.sum(T.mul(logp, Tensor(onehot)))


def gkd_loss(student, teacher, old_columns, temperature=2.0, direction="teacher-student", tau_squared=False):
    old_columns = list(old_columns)
    if not old_columns:
        raise ValueError("global distillation needs at least one old class")
    return _maybe_tau2(group_kl(student, teacher, old_columns, temperature, direction), temperature, tau_squared)


def tkd_loss(
    student, teacher, tasks: Sequence[TaskSpec], temperature=2.0, registry=None,
    direction="teacher-student", tau_squared=False,
):
    if not tasks:
        raise ValueError("task-wise distillation needs at least one prior task")
    total = None
    for task in tasks:
        term = group_kl(student, teacher, _columns_for(task.classes, registry), temperature, direction)
        total = term if total is None else T.add(total, term)
    return _maybe_tau2(total, temperature, tau_squared)


def fdkd_loss(
    student, teacher, pool: TaskPool, temperature=2.0, registry=None,
    direction="teacher-student", tau_squared=False,
):
    total = None
    for group in enumerate_groups(pool):
        term = group_kl(student, teacher, _columns_for(group.classes, registry), temperature, direction)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("dense distillation needs a non-empty task pool")
    return _maybe_tau2(total, temperature, tau_squared)


def rdkd_loss(
    student, teacher, pool: TaskPool, temperature=2.0, rng=None, registry=None,
    direction="teacher-student", tau_squared=False, group: ClassGroup | None = None,
) -> tuple[Tensor, ClassGroup]:
    """KL on one uniformly drawn pool group; returns the term and the group.

    Passing ``group`` skips the draw (used for gradient checks).
    """
    if group is None:
        if rng is None:
            raise ValueError("rdkd_loss needs a random generator")
        group = sample_group(pool, rng)
    term = group_kl(student, teacher, _columns_for(group.classes, registry), temperature, direction)
    return _maybe_tau2(term, temperature, tau_squared), group


def total_loss(cls: Tensor, kd: Tensor | None, lam: float) -> LossValue:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if kd is None:
        return LossValue(cls, {"cls": cls.item(), "kd": 0.0, "lambda": float(lam)})
    value = T.add(cls, T.scale(kd, lam))
    return LossValue(value, {"cls": cls.item(), "kd": kd.item(), "lambda": float(lam)})
