"""Offline model compression with pool-structured distillation.

The class set of a static dataset is cut into ``k`` equal pseudo-tasks and
a task pool is built over them. A narrow student is then trained on the
full dataset with ``cls + lambda * kd`` against a fixed teacher, where the
distillation term is either the plain all-classes KL (the control) or the
KL on one uniformly drawn pseudo-task group per step.

Training hyperparameters come from the base-task section of a protocol
config (``epochs-base``, ``lr-base``, ``batch-size``, ...); the student
architecture from ``model``; the constant ``lambda`` from
``weighting.lambda-base``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ProtocolConfig
from .data import Dataset
from .distillation import classification_loss, group_kl, rdkd_loss, total_loss
from .metrics import accuracy
from .model import MLPClassifier
from .taskpool import TaskPool, TaskSpec

COMPRESS_VARIANTS = ("rdkd", "plain")


@dataclass
class CompressResult:
    variant: str
    pseudo_tasks: int
    seed: int
    student_acc: float
    teacher_acc: float
    initial_kd: float
    epoch_loss: list[dict] = field(default_factory=list)
    group_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "pseudo-tasks": self.pseudo_tasks,
            "seed": self.seed,
            "student-acc": self.student_acc,
            "teacher-acc": self.teacher_acc,
            "initial-kd": self.initial_kd,
            "epoch-loss": self.epoch_loss,
            "group-counts": self.group_counts,
        }


def pseudo_task_pool(classes, k: int) -> TaskPool:
    """Split ``classes`` (in the given order) into ``k`` equal pseudo-tasks."""
    classes = [int(c) for c in classes]
    if k < 1 or len(classes) % k:
        raise ValueError(f"{len(classes)} classes cannot be split into {k} equal pseudo-tasks")
    per = len(classes) // k
    pool = TaskPool()
    for i in range(k):
        pool = pool.extend(TaskSpec(i, tuple(classes[i * per : (i + 1) * per])))
    return pool


def _batches(n, size, rng):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def train_teacher(cfg: ProtocolConfig, train: Dataset, hidden_dims, seed: int = 0) -> MLPClassifier:
    """Plain cross-entropy training of a (usually wider) teacher on every class."""
    rng = np.random.default_rng(seed)
    model = MLPClassifier(train.dim, hidden_dims, cfg.model.cosine_head, cfg.model.cosine_scale, seed=rng)
    model.expand_head(train.classes)
    cols = list(range(model.n_classes))
    opt = T.SGD(model.parameters(), cfg.lr_base, cfg.momentum, cfg.weight_decay)
    xs, ys = train.inputs, train.labels
    for _ in range(cfg.epochs_base):
        for idx in _batches(len(xs), cfg.batch_size, rng):
            T.backward(classification_loss(model(xs[idx]), cols, ys[idx], model.class_registry))
            opt.step()
    return model.snapshot()


def compress(
    teacher: MLPClassifier,
    cfg: ProtocolConfig,
    train: Dataset,
    test: Dataset,
    pseudo_tasks: int,
    variant: str = "rdkd",
    seed: int | None = None,
    student: MLPClassifier | None = None,
) -> CompressResult:
    """Distil ``teacher`` into a student built from ``cfg.model``.

    ``variant="plain"`` distils over the single all-classes group;
    ``"rdkd"`` draws one pseudo-task group per step. ``student`` may be
    passed to start from given weights (it is trained in place).
    """
    if variant not in COMPRESS_VARIANTS:
        raise ValueError(f"unknown compression variant {variant!r}; expected one of {COMPRESS_VARIANTS}")
    classes = list(teacher.class_registry)
    if sorted(classes) != train.classes:
        raise ValueError(f"teacher classes {sorted(classes)} differ from the dataset classes {train.classes}")
    pool = pseudo_task_pool(classes, pseudo_tasks)
    seed = cfg.seed if seed is None else seed
    init, shuffle, groups = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if student is None:
        student = MLPClassifier(train.dim, cfg.model.hidden_dims, cfg.model.cosine_head, cfg.model.cosine_scale, seed=init)
        student.expand_head(classes)
    elif list(student.class_registry) != classes:
        raise ValueError("student and teacher heads must list the classes in the same order")

    cols = list(range(len(classes)))
    tau = cfg.distill.temperature
    direction = cfg.distill.kl_direction
    lam = cfg.weighting.lambda_base
    xs, ys = train.inputs, train.labels

    def kd_term(logits, t_logits):
        if variant == "plain":
            return group_kl(logits, t_logits, cols, tau, direction), None
        return rdkd_loss(logits, t_logits, pool, tau, rng=groups, registry=classes, direction=direction)

    with T.no_grad():
        initial_kd = group_kl(student(xs), teacher(xs).data, cols, tau, direction).item()

    opt = T.SGD(student.parameters(), cfg.lr_base, cfg.momentum, cfg.weight_decay)
    epoch_loss, counts = [], {}
    for _ in range(cfg.epochs_base):
        sums = {"cls": 0.0, "kd": 0.0, "total": 0.0}
        steps = 0
        for idx in _batches(len(xs), cfg.batch_size, shuffle):
            xb, yb = xs[idx], ys[idx]
            logits = student(xb)
            with T.no_grad():
                t_logits = teacher(xb).data
            kd, group = kd_term(logits, t_logits)
            if group is not None:
                key = ",".join(str(i) for i in group.member_tasks)
                counts[key] = counts.get(key, 0) + 1
            loss = total_loss(classification_loss(logits, cols, yb, classes), kd, lam)
            T.backward(loss.value)
            opt.step()
            for k in ("cls", "kd"):
                sums[k] += loss.breakdown[k]
            sums["total"] += loss.item()
            steps += 1
        epoch_loss.append({k: v / steps for k, v in sums.items()})

    return CompressResult(
        variant=variant,
        pseudo_tasks=pseudo_tasks,
        seed=seed,
        student_acc=accuracy(student, test.inputs, test.labels),
        teacher_acc=accuracy(teacher, test.inputs, test.labels),
        initial_kd=initial_kd,
        epoch_loss=epoch_loss,
        group_counts=dict(sorted(counts.items())),
    )


def run_compression(teacher, cfg, train, test, pseudo_tasks: int, variant: str = "rdkd", seed=None) -> dict:
    """The chosen variant next to the plain-KD control, same student init and batches."""
    chosen = compress(teacher, cfg, train, test, pseudo_tasks, variant, seed)
    control = compress(teacher, cfg, train, test, pseudo_tasks, "plain", seed)
    return {
        "variant": chosen.to_dict(),
        "control": control.to_dict(),
        "teacher-acc": chosen.teacher_acc,
        "gain": chosen.student_acc - control.student_acc,
    }
