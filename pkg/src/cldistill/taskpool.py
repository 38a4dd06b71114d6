"""Task pool: every non-empty combination of the tasks learned so far.

Only the task list is stored. Groups are enumerated on demand, ordered by
size and then lexicographically by task id, or sampled uniformly.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import PoolLimitError

ENUMERATION_LIMIT = 2**12


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if not self.classes:
            raise ValueError(f"task {self.task_id} has no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"task {self.task_id} repeats a class")

    def to_dict(self) -> dict:
        return {"task-id": self.task_id, "classes": list(self.classes)}


@dataclass(frozen=True)
class ClassGroup:
    member_tasks: tuple[int, ...]
    classes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class TaskPool:
    tasks: tuple[TaskSpec, ...] = field(default_factory=tuple)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def logical_size(self) -> int:
        return 2 ** len(self.tasks) - 1

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(c for t in self.tasks for c in t.classes))

    def extend(self, new_task: TaskSpec) -> "TaskPool":
        return pool_extend(self, new_task)

    @functools.cached_property
    def _by_id(self) -> dict[int, TaskSpec]:
        return {t.task_id: t for t in self.tasks}

    @functools.cached_property
    def _groups(self) -> dict[tuple[int, ...], ClassGroup]:
        return {}

    def group(self, task_ids) -> ClassGroup:
        ids = tuple(sorted(task_ids))
        cached = self._groups.get(ids)
        if cached is None:
            by_id = self._by_id
            classes = sorted(c for i in ids for c in by_id[i].classes)
            cached = self._groups[ids] = ClassGroup(ids, tuple(classes))
        return cached

    def all_classes_group(self) -> ClassGroup:
        return self.group(t.task_id for t in self.tasks)

    def to_dict(self) -> dict:
        return {"tasks": [t.to_dict() for t in self.tasks], "logical-size": self.logical_size}


def pool_extend(pool: TaskPool, new_task: TaskSpec) -> TaskPool:
    if any(t.task_id == new_task.task_id for t in pool.tasks):
        raise ValueError(f"task id {new_task.task_id} already in the pool")
    clash = set(new_task.classes) & set(pool.classes)
    if clash:
        raise ValueError(f"task {new_task.task_id} reuses classes {sorted(clash)}")
    tasks = sorted(pool.tasks + (new_task,), key=lambda t: t.task_id)
    return TaskPool(tuple(tasks))


def iter_groups(pool: TaskPool) -> Iterator[ClassGroup]:
    ids = [t.task_id for t in pool.tasks]
    for size in range(1, len(ids) + 1):
        for combo in itertools.combinations(ids, size):
            yield pool.group(combo)


def enumerate_groups(pool: TaskPool, limit: int = ENUMERATION_LIMIT) -> list[ClassGroup]:
    if pool.logical_size > limit:
        raise PoolLimitError(
            f"task pool with {pool.n_tasks} tasks has {pool.logical_size} groups, "
            f"over the enumeration limit of {limit}; use random group sampling instead"
        )
    return list(iter_groups(pool))


def sample_group(pool: TaskPool, rng: np.random.Generator) -> ClassGroup:
    """Uniform draw over the non-empty subsets: n fair bits, rejecting all-zero."""
    n = pool.n_tasks
    if n == 0:
        raise ValueError("cannot sample from an empty task pool")
    while True:
        bits = rng.integers(0, 2, size=n)
        if bits.any():
            return pool.group(t.task_id for t, b in zip(pool.tasks, bits) if b)
