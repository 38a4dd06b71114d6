import numpy as np
import pytest

from cldistill.compress import compress, pseudo_task_pool, run_compression, train_teacher
from cldistill.config import from_dict
from cldistill.data import generate_blobs
from cldistill.model import MLPClassifier

CFG = from_dict({
    "epochs-base": 3,
    "model": {"hidden-dims": [4]},
    "weighting": {"lambda-base": 2.0},
    "dataset": {"num-classes": 8, "dim": 6, "samples-per-class": 20},
})


@pytest.fixture(scope="module")
def setup():
    train, test = generate_blobs(8, 6, 20, 3.0, 1.0, seed=0)
    teacher = train_teacher(CFG, train, [16], seed=0)
    return train, test, teacher


def test_pseudo_task_pool():
    pool = pseudo_task_pool([5, 1, 2, 7], 2)
    assert [t.classes for t in pool.tasks] == [(5, 1), (2, 7)]
    with pytest.raises(ValueError):
        pseudo_task_pool(range(8), 3)


def test_single_pseudo_task_reduces_to_plain(setup):
    train, test, teacher = setup
    a = compress(teacher, CFG, train, test, 1, "rdkd", seed=3)
    b = compress(teacher, CFG, train, test, 1, "plain", seed=3)
    assert a.student_acc == b.student_acc
    assert a.epoch_loss == b.epoch_loss
    assert a.group_counts == {"0": sum(1 for _ in range(0, len(train), 32)) * 3}


def test_identical_student_starts_with_zero_kd(setup):
    train, test, teacher = setup
    student = MLPClassifier(6, [16])
    student.expand_head(teacher.class_registry)
    student.copy_state_from(teacher)
    res = compress(teacher, CFG, train, test, 4, "rdkd", student=student)
    assert res.initial_kd == 0.0


def test_indivisible_pseudo_tasks(setup):
    train, test, teacher = setup
    with pytest.raises(ValueError):
        compress(teacher, CFG, train, test, 3)
    with pytest.raises(ValueError):
        compress(teacher, CFG, train, test, 4, "gkd")


def test_run_compression_report(setup):
    train, test, teacher = setup
    out = run_compression(teacher, CFG, train, test, 4, seed=1)
    assert out["variant"]["variant"] == "rdkd" and out["control"]["variant"] == "plain"
    assert out["gain"] == out["variant"]["student-acc"] - out["control"]["student-acc"]
    assert set(out["variant"]["group-counts"]) <= {",".join(map(str, g)) for g in _subsets(4)}
    assert out["control"]["group-counts"] == {}


def _subsets(n):
    import itertools

    return [c for k in range(1, n + 1) for c in itertools.combinations(range(n), k)]


def test_teacher_mismatch(setup):
    train, test, teacher = setup
    small_train, small_test = generate_blobs(4, 6, 10, 3.0, 1.0, seed=0)
    with pytest.raises(ValueError):
        compress(teacher, CFG, small_train, small_test, 2)
    assert np.isfinite(teacher(train.inputs[:2]).data).all()
