"""Class-incremental training protocol.

A run trains a base task with plain cross-entropy, then learns each
incremental task with ``cls + lambda * kd`` against a frozen snapshot of
the previous model, mixing replayed exemplars into every minibatch.
After each task the task pool, per-class feature statistics and the
exemplar store are updated, and the model is evaluated on every task
seen so far.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ProtocolConfig
from .data import Dataset, TaskAssignment, assign_tasks, generate_blobs, load_cache, load_idx
from .distillation import (
    classification_loss,
    fdkd_loss,
    gkd_loss,
    rdkd_loss,
    tkd_loss,
    total_loss,
)
from .errors import ConfigError
from .metrics import (
    AccuracyMatrix,
    FlatnessCurve,
    accuracy,
    avg_incremental_accuracy,
    base_task_trace,
    mean_ce_loss,
    perturbation_sensitivity,
    stability_plasticity_split,
)
from .model import MLPClassifier
from .replay import ExemplarStore, replay_batch, update_store
from .taskpool import TaskPool, TaskSpec
from .weighting import ClassStats, compute_class_stats, compute_lambda

log = logging.getLogger(__name__)


@dataclass
class RunStreams:
    """Independent random streams so that one consumer never shifts another."""

    init: np.random.Generator
    shuffle: np.random.Generator
    replay: np.random.Generator
    groups: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass
class ContinualState:
    model: MLPClassifier
    pool: TaskPool
    store: ExemplarStore
    stats: dict[int, ClassStats]
    streams: RunStreams
    tasks: list[TaskSpec] = field(default_factory=list)
    # training samples of the most recent step, as (inputs, labels)
    last_train: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class StepRecord:
    step: int
    task_id: int
    new_classes: list[int]
    classes_seen: list[int]
    task_acc: list[float]
    seen_acc: float
    old_acc: float | None
    new_acc: float | None
    epoch_loss: list[dict]
    lambda_per_epoch: list[float]
    lambda_trace: list[float]
    group_counts: dict[str, int]
    wall_time: float

    def to_dict(self, include_time: bool = True) -> dict:
        d = {
            "step": self.step,
            "task-id": self.task_id,
            "new-classes": self.new_classes,
            "classes-seen": self.classes_seen,
            "task-acc": self.task_acc,
            "seen-acc": self.seen_acc,
            "old-acc": self.old_acc,
            "new-acc": self.new_acc,
            "epoch-loss": self.epoch_loss,
            "lambda-per-epoch": self.lambda_per_epoch,
            "lambda-trace": self.lambda_trace,
            "group-counts": self.group_counts,
        }
        if include_time:
            d["wall-time"] = self.wall_time
        return d


@dataclass
class RunLog:
    config: dict
    assignment: TaskAssignment
    steps: list[StepRecord] = field(default_factory=list)
    matrix: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    final_train_loss: float | None = None
    flatness: FlatnessCurve | None = None
    pool: dict | None = None
    state: ContinualState | None = field(default=None, repr=False, compare=False)

    @property
    def avg_incremental_accuracy(self) -> float:
        return avg_incremental_accuracy(self.matrix)

    @property
    def base_trace(self) -> list[float]:
        return base_task_trace(self.matrix)

    def summary(self) -> dict:
        """Deterministic run summary (no timings)."""
        return {
            "variant": self.config["distill"]["variant"],
            "seed": self.config["seed"],
            "class-order-seed": self.assignment.seed,
            "tasks": self.assignment.to_dict()["tasks"],
            "avg-incremental-accuracy": self.avg_incremental_accuracy,
            "seen-acc": self.matrix.seen,
            "base-task-trace": self.base_trace,
            "accuracy-matrix": self.matrix.acc,
            "old-acc": [s.old_acc for s in self.steps],
            "new-acc": [s.new_acc for s in self.steps],
            "lambda-mean": [float(np.mean(s.lambda_trace)) if s.lambda_trace else None for s in self.steps],
            "final-train-loss": self.final_train_loss,
            "flatness": self.flatness.to_dict() if self.flatness else None,
            "pool": self.pool,
        }

    def jsonl_records(self) -> list[dict]:
        return [{"type": "step", **s.to_dict()} for s in self.steps]


# ---------------------------------------------------------------------------
# data loading


def load_datasets(cfg: ProtocolConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return generate_blobs(
            ds.num_classes, ds.dim, ds.samples_per_class, ds.class_separation, ds.noise_sigma, ds.seed
        )
    if ds.kind == "idx":
        return (
            load_idx(ds.train_images, ds.train_labels, "train"),
            load_idx(ds.test_images, ds.test_labels, "test"),
        )
    if ds.kind == "cache":
        return load_cache(ds.train_manifest), load_cache(ds.test_manifest)
    raise ConfigError(f"dataset.kind: unknown dataset kind {ds.kind!r}")


# ---------------------------------------------------------------------------
# training


def lr_at(epoch: int, base_lr: float, milestones, decay: float) -> float:
    return base_lr * decay ** sum(1 for m in milestones if epoch >= m)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _check_classes_present(data: Dataset, classes, what: str) -> None:
    present = set(np.unique(data.labels).tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"{what}: no training samples for classes {missing}")


def train_base(cfg: ProtocolConfig, train: Dataset, task: TaskSpec, streams: RunStreams | None = None) -> ContinualState:
    if not task.classes:
        raise ValueError("base task has no classes")
    _check_classes_present(train, task.classes, "base task")
    streams = streams or RunStreams.from_seed(cfg.seed)
    model = MLPClassifier(
        train.dim,
        cfg.model.hidden_dims,
        cosine_head=cfg.model.cosine_head,
        cosine_scale=cfg.model.cosine_scale,
        seed=streams.init,
    )
    model.expand_head(task.classes)
    data = train.subset(task.classes)
    xs, ys = data.inputs, data.labels
    cols = list(range(model.n_classes))
    opt = T.SGD(model.parameters(), cfg.lr_base, cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.epochs_base):
        opt.lr = lr_at(epoch, cfg.lr_base, cfg.lr_milestones_base, cfg.lr_decay)
        for idx in _batches(len(xs), cfg.batch_size, streams.shuffle):
            loss = classification_loss(model(xs[idx]), cols, ys[idx], model.class_registry)
            T.backward(loss)
            opt.step()
    state = ContinualState(model, TaskPool(), ExemplarStore(cfg.exemplar_budget), {}, streams)
    _finish_task(state, task, data)
    state.last_train = (xs, ys)
    return state


def _finish_task(state: ContinualState, task: TaskSpec, data: Dataset) -> None:
    state.pool = state.pool.extend(task)
    for c in task.classes:
        state.stats[c] = compute_class_stats(state.model, data.inputs[data.labels == c], c)
    update_store(state.store, task, state.model, data.inputs, data.labels)
    state.tasks.append(task)


def replay_count(cfg: ProtocolConfig, n_old: int, n_all: int, store_size: int) -> int:
    if store_size == 0 or cfg.replay_fraction == 0:
        return 0
    frac = n_old / n_all if cfg.replay_fraction is None else cfg.replay_fraction
    return min(cfg.batch_size - 1, max(1, int(round(cfg.batch_size * frac))))


def _kd_term(cfg: ProtocolConfig, state: ContinualState, student, teacher, old_cols, registry):
    d = cfg.distill
    kw = {"direction": d.kl_direction, "tau_squared": d.tau_squared}
    tau = d.temperature
    if d.variant == "gkd":
        return gkd_loss(student, teacher, old_cols, tau, **kw), None
    if d.variant == "tkd":
        return tkd_loss(student, teacher, state.pool.tasks, tau, registry=registry, **kw), None
    if d.variant == "fdkd":
        return fdkd_loss(student, teacher, state.pool, tau, registry=registry, **kw), None
    if d.variant == "rdkd":
        return rdkd_loss(student, teacher, state.pool, tau, rng=state.streams.groups, registry=registry, **kw)
    raise ValueError(f"no distillation term for variant {d.variant!r}")


def train_increment(state: ContinualState, cfg: ProtocolConfig, task: TaskSpec, train: Dataset) -> StepRecord:
    """Learn one new task in place; returns the training trace (evaluation fields empty)."""
    started = time.perf_counter()
    model = state.model
    clash = set(task.classes) & set(model.class_registry)
    if clash:
        raise ValueError(f"task {task.task_id} reuses learned classes {sorted(clash)}")
    _check_classes_present(train, task.classes, f"task {task.task_id}")
    variant = cfg.distill.variant

    # Snapshot before expansion: the teacher never has columns for the new classes.
    teacher = model.snapshot()
    old_classes = list(model.class_registry)
    model.expand_head(task.classes)
    registry = model.class_registry
    n_old, n_all = len(old_classes), model.n_classes
    old_cols = list(range(n_old))
    new_cols = model.columns(task.classes)
    all_cols = list(range(n_all))

    data = train.subset(task.classes)
    xs, ys = data.inputs, data.labels
    n_rep = replay_count(cfg, n_old, n_all, len(state.store))
    n_new = cfg.batch_size - n_rep
    # New classes have no post-training features yet; the frozen encoder provides
    # provisional ones, replaced when the task completes.
    for c in task.classes:
        state.stats[c] = compute_class_stats(teacher, xs[ys == c], c)
    fixed_lambda = None
    if variant not in ("none", "rdkd"):
        fixed_lambda = compute_lambda(cfg.weighting, state.pool.all_classes_group(), task.classes, state.stats)

    opt = T.SGD(model.parameters(), cfg.lr_inc, cfg.momentum, cfg.weight_decay)
    epoch_loss, lambda_per_epoch, lambda_trace = [], [], []
    group_counts: dict[str, int] = {}
    for epoch in range(cfg.epochs_inc):
        opt.lr = lr_at(epoch, cfg.lr_inc, cfg.lr_milestones_inc, cfg.lr_decay)
        sums = {"cls": 0.0, "kd": 0.0, "total": 0.0}
        lams = []
        steps = 0
        for idx in _batches(len(xs), n_new, state.streams.shuffle):
            xb, yb = xs[idx], ys[idx]
            nb = len(idx)
            if n_rep:
                rx, ry = replay_batch(state.store, n_rep, state.streams.replay)
                xb, yb = np.concatenate([xb, rx]), np.concatenate([yb, ry])
            logits = model(xb)
            if cfg.cls_scope == "new" and n_rep:
                ce_new = classification_loss(T.take_rows(logits, range(nb)), new_cols, yb[:nb], registry)
                ce_rep = classification_loss(T.take_rows(logits, range(nb, len(yb))), all_cols, yb[nb:], registry)
                cls = T.scale(T.add(T.scale(ce_new, nb), T.scale(ce_rep, len(yb) - nb)), 1.0 / len(yb))
            elif cfg.cls_scope == "new":
                cls = classification_loss(logits, new_cols, yb, registry)
            else:
                cls = classification_loss(logits, all_cols, yb, registry)

            kd, lam = None, 0.0
            if variant != "none":
                rows = len(yb) if cfg.distill.kd_on_replay else nb
                student = logits if rows == len(yb) else T.take_rows(logits, range(rows))
                with T.no_grad():
                    t_logits = teacher(xb[:rows]).data
                kd, group = _kd_term(cfg, state, student, t_logits, old_cols, registry)
                if group is not None:
                    lam = compute_lambda(cfg.weighting, group, task.classes, state.stats)
                    key = ",".join(str(i) for i in group.member_tasks)
                    group_counts[key] = group_counts.get(key, 0) + 1
                else:
                    lam = fixed_lambda
                lams.append(lam)
            loss = total_loss(cls, kd, lam)
            T.backward(loss.value)
            opt.step()
            sums["cls"] += loss.breakdown["cls"]
            sums["kd"] += loss.breakdown["kd"]
            sums["total"] += loss.item()
            steps += 1
        epoch_loss.append({k: v / steps for k, v in sums.items()})
        lambda_per_epoch.append(float(np.mean(lams)) if lams else 0.0)
        lambda_trace.extend(lams)

    old_x, old_y = state.store.arrays()
    _finish_task(state, task, data)
    if len(old_x):
        state.last_train = (np.concatenate([xs, old_x]), np.concatenate([ys, old_y]))
    else:
        state.last_train = (xs, ys)
    return StepRecord(
        step=len(state.tasks) - 1,
        task_id=task.task_id,
        new_classes=list(task.classes),
        classes_seen=sorted(model.class_registry),
        task_acc=[],
        seen_acc=float("nan"),
        old_acc=None,
        new_acc=None,
        epoch_loss=epoch_loss,
        lambda_per_epoch=lambda_per_epoch,
        lambda_trace=lambda_trace,
        group_counts=dict(sorted(group_counts.items())),
        wall_time=time.perf_counter() - started,
    )


def evaluate_step(state: ContinualState, test: Dataset, record: StepRecord) -> None:
    model = state.model
    record.task_acc = []
    for task in state.tasks:
        part = test.subset(task.classes)
        record.task_acc.append(accuracy(model, part.inputs, part.labels))
    seen = test.subset(model.class_registry)
    record.seen_acc = accuracy(model, seen.inputs, seen.labels)
    step = len(state.tasks) - 1
    if step >= 1:
        record.old_acc, record.new_acc = stability_plasticity_split(model, state.tasks, step, seen.inputs, seen.labels)


def run_experiment(
    cfg: ProtocolConfig,
    train: Dataset,
    test: Dataset,
    class_order_seed: int | None = None,
    flatness: bool = True,
) -> RunLog:
    """Base task plus every increment; evaluated after each step."""
    order_seed = cfg.class_order_seed if class_order_seed is None else class_order_seed
    if len(train.classes) != cfg.total_classes:
        raise ConfigError(f"total-classes: config says {cfg.total_classes}, training data has {len(train.classes)}")
    assignment = assign_tasks(cfg.total_classes, cfg.base_fraction, cfg.num_increments, order_seed)
    runlog = RunLog(cfg.to_dict(), assignment)
    runlog.config["class-order-seed"] = order_seed
    streams = RunStreams.from_seed(cfg.seed)

    started = time.perf_counter()
    state = train_base(cfg, train, assignment.base, streams)
    base_record = StepRecord(0, 0, list(assignment.base.classes), sorted(state.model.class_registry),
                             [], float("nan"), None, None, [], [], [], {}, time.perf_counter() - started)
    evaluate_step(state, test, base_record)
    runlog.steps.append(base_record)
    runlog.matrix.add_step(base_record.task_acc, base_record.seen_acc)
    log.info("step 0: seen-acc %.2f", base_record.seen_acc)

    for task in assignment.tasks[1:]:
        record = train_increment(state, cfg, task, train)
        evaluate_step(state, test, record)
        runlog.steps.append(record)
        runlog.matrix.add_step(record.task_acc, record.seen_acc)
        log.info("step %d: seen-acc %.2f base-acc %.2f", record.step, record.seen_acc, record.task_acc[0])

    x_fin, y_fin = state.last_train
    runlog.final_train_loss = mean_ce_loss(state.model, x_fin, y_fin)
    ev = cfg.evaluation
    if flatness and ev.flatness_sigmas:
        rng = np.random.default_rng(ev.flatness_seed)
        runlog.flatness = perturbation_sensitivity(
            state.model, x_fin, y_fin, ev.flatness_sigmas, ev.draws_per_sigma, rng, antithetic=ev.antithetic
        )
    runlog.pool = state.pool.to_dict()
    runlog.state = state
    return runlog
