import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldistill import tensor as T
from cldistill.distillation import (
    DistillConfig,
    classification_loss,
    fdkd_loss,
    gkd_loss,
    group_kl,
    kl_div,
    rdkd_loss,
    softmax_temp,
    tkd_loss,
    total_loss,
)
from cldistill.errors import ShapeError
from cldistill.taskpool import TaskPool, TaskSpec
from cldistill.tensor import Tensor

import oracles


def _pool(*task_classes):
    pool = TaskPool()
    for i, classes in enumerate(task_classes):
        pool = pool.extend(TaskSpec(i, classes))
    return pool


def _pair(rng, batch, k, spread=3.0):
    return rng.normal(0, spread, size=(batch, k)), rng.normal(0, spread, size=(batch, k))


def test_kl_div_matches_loop_oracle():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=3)
    q = rng.dirichlet(np.ones(4), size=3)
    expected = math.fsum(oracles.kl(a, b) for a, b in zip(p, q)) / 3
    assert kl_div(p, q).item() == pytest.approx(expected, abs=1e-14)


def test_kl_div_identical_is_zero_and_shapes_checked():
    p = np.array([[0.2, 0.8], [0.5, 0.5]])
    assert kl_div(p, p).item() == 0.0
    with pytest.raises(ShapeError):
        kl_div(p, p[:, :1])


def test_kl_div_handles_zero_probabilities():
    p = np.array([[1.0, 0.0]])
    q = np.array([[0.5, 0.5]])
    assert kl_div(p, q).item() == pytest.approx(math.log(2))


def test_softmax_temp_matches_oracle():
    row = [1.0, -2.0, 0.5]
    out = softmax_temp([row], 2.0).data[0]
    assert np.allclose(out, oracles.softmax(row, 2.0), atol=1e-15)
    with pytest.raises(ValueError):
        softmax_temp([row], 0.0)


@pytest.mark.parametrize("direction", ["teacher-student", "student-teacher"])
def test_group_kl_matches_oracle(direction):
    rng = np.random.default_rng(1)
    s, t = _pair(rng, 5, 6)
    cols = [0, 2, 5]
    got = group_kl(Tensor(s), t, cols, 2.0, direction).item()
    assert got == pytest.approx(oracles.group_kl(s, t, cols, 2.0, direction), abs=1e-13)


def test_identical_logits_give_exactly_zero():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4, 5))
    assert group_kl(Tensor(s), s.copy(), range(5), 2.0).item() == 0.0
    assert gkd_loss(Tensor(s), s.copy(), range(5), 3.0).item() == 0.0


def test_one_prior_task_collapses_all_variants():
    rng = np.random.default_rng(3)
    pool = _pool((0, 1, 2))
    for _ in range(20):
        s, t = _pair(rng, 4, 3)
        g = gkd_loss(Tensor(s), t, [0, 1, 2]).item()
        tk = tkd_loss(Tensor(s), t, pool.tasks).item()
        fd = fdkd_loss(Tensor(s), t, pool).item()
        assert g == tk == fd


def test_two_prior_tasks_dense_is_global_plus_taskwise():
    rng = np.random.default_rng(4)
    pool = _pool((0, 1), (2, 3, 4))
    for _ in range(20):
        s, t = _pair(rng, 3, 5)
        g = gkd_loss(Tensor(s), t, range(5)).item()
        tk = tkd_loss(Tensor(s), t, pool.tasks).item()
        fd = fdkd_loss(Tensor(s), t, pool).item()
        assert fd == pytest.approx(g + tk, abs=1e-12)


def test_dense_matches_power_set_oracle():
    rng = np.random.default_rng(5)
    pool = _pool((0,), (1, 2), (3, 4), (5,))
    s, t = _pair(rng, 3, 6)
    tasks = {0: [0], 1: [1, 2], 2: [3, 4], 3: [5]}
    assert fdkd_loss(Tensor(s), t, pool, 2.0).item() == pytest.approx(oracles.fdkd(s, t, tasks, 2.0), abs=1e-12)


def test_registry_maps_class_ids_to_columns():
    rng = np.random.default_rng(6)
    s, t = _pair(rng, 2, 3)
    pool = _pool((7,), (3, 9))
    registry = [9, 3, 7]
    got = tkd_loss(Tensor(s), t, pool.tasks, registry=registry).item()
    # task (3, 9) lives in columns [1, 0]; the single-class task is zero
    assert got == pytest.approx(oracles.group_kl(s, t, [1, 0], 2.0), abs=1e-13)


def test_single_class_group_contributes_nothing():
    s = np.array([[1.0, 5.0]])
    assert group_kl(Tensor(s), -s, [1], 2.0).item() == 0.0


def test_tau_squared_scaling():
    rng = np.random.default_rng(7)
    s, t = _pair(rng, 3, 4)
    plain = gkd_loss(Tensor(s), t, range(4), 3.0).item()
    scaled = gkd_loss(Tensor(s), t, range(4), 3.0, tau_squared=True).item()
    assert scaled == pytest.approx(9 * plain, rel=1e-14)


def test_rdkd_fixed_group_equals_that_group():
    rng = np.random.default_rng(8)
    pool = _pool((0,), (1, 2), (3,))
    s, t = _pair(rng, 3, 4)
    group = pool.group([0, 2])
    loss, used = rdkd_loss(Tensor(s), t, pool, 2.0, group=group)
    assert used is group
    assert loss.item() == pytest.approx(oracles.group_kl(s, t, [0, 3], 2.0), abs=1e-13)


def test_rdkd_needs_rng_without_group():
    with pytest.raises(ValueError):
        rdkd_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), _pool((0, 1)))


def test_rdkd_mean_approaches_dense_over_pool_size():
    rng = np.random.default_rng(9)
    pool = _pool((0, 1), (2,), (3, 4))
    s, t = _pair(rng, 4, 5)
    dense = fdkd_loss(Tensor(s), t, pool).item()
    draws = np.random.default_rng(10)
    with T.no_grad():
        vals = [rdkd_loss(Tensor(s), t, pool, rng=draws)[0].item() for _ in range(20_000)]
    assert np.mean(vals) == pytest.approx(dense / 7, rel=0.02)


def test_classification_loss_matches_oracle():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(6, 5))
    labels = np.array([3, 1, 4, 1, 3, 4])
    cols = [1, 3, 4]
    got = classification_loss(Tensor(logits), cols, labels).item()
    assert got == pytest.approx(oracles.cross_entropy(logits, cols, [1, 0, 2, 0, 1, 2]), abs=1e-13)


def test_classification_loss_label_outside_columns():
    with pytest.raises(ValueError):
        classification_loss(Tensor(np.zeros((1, 3))), [0, 1], [2])
    with pytest.raises(ShapeError):
        classification_loss(Tensor(np.zeros((2, 3))), [0, 1], [0])


def test_teacher_side_receives_no_gradient():
    rng = np.random.default_rng(12)
    s, t = _pair(rng, 3, 4)
    student = Tensor(s, requires_grad=True)
    teacher = Tensor(t, requires_grad=True)
    T.backward(fdkd_loss(student, teacher, _pool((0, 1), (2, 3))))
    assert teacher.grad is None
    assert student.grad is not None


def test_total_loss_combines_terms():
    cls = Tensor([1.0], requires_grad=True)
    kd = Tensor([2.0], requires_grad=True)
    out = total_loss(T.sum(cls), T.sum(kd), 0.5)
    assert out.item() == 2.0
    assert out.breakdown == {"cls": 1.0, "kd": 2.0, "lambda": 0.5}
    T.backward(out.value)
    assert cls.grad.tolist() == [1.0] and kd.grad.tolist() == [0.5]
    assert total_loss(T.sum(cls), T.sum(kd), 0.0).item() == 1.0
    with pytest.raises(ValueError):
        total_loss(T.sum(cls), None, -1.0)


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(variant="bogus")
    with pytest.raises(ValueError):
        DistillConfig(temperature=0)
    with pytest.raises(ValueError):
        DistillConfig(kl_direction="sideways")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), tau=st.floats(0.5, 8.0))
def test_kl_is_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    s, t = _pair(rng, 3, 4, spread=5.0)
    assert group_kl(Tensor(s), t, range(4), tau).item() >= -1e-15
    assert group_kl(Tensor(s), t, range(4), tau, "student-teacher").item() >= -1e-15
