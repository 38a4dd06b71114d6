import numpy as np
import pytest

from cldistill import tensor as T
from cldistill.config import from_dict
from cldistill.distillation import classification_loss
from cldistill.errors import ConfigError
from cldistill.taskpool import TaskSpec
from cldistill.trainer import (
    RunStreams,
    load_datasets,
    lr_at,
    replay_count,
    run_experiment,
    train_base,
    train_increment,
)

SMALL = {
    "total-classes": 4,
    "num-increments": 2,
    "epochs-base": 4,
    "epochs-inc": 3,
    "lr-inc": 0.05,
    "exemplar-budget": 3,
    "model": {"hidden-dims": [8]},
    "weighting": {"normalize-features": True},
    "evaluation": {"draws-per-sigma": 4},
    "dataset": {"num-classes": 4, "dim": 5, "samples-per-class": 20, "class-separation": 3.0, "seed": 1},
}


def _cfg(**over):
    raw = {**SMALL}
    for key, value in over.items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node[p] = dict(node.get(p, {}))
            node = node[p]
        node[parts[-1]] = value
    return from_dict(raw)


def _run(cfg, **kw):
    train, test = load_datasets(cfg)
    return run_experiment(cfg, train, test, **kw)


def test_single_increment_structure():
    cfg = _cfg(**{"num-increments": 1})
    log = _run(cfg)
    assert len(log.steps) == 2
    assert [len(r) for r in log.matrix.acc] == [1, 2]
    assert log.steps[1].old_acc is not None and log.steps[0].old_acc is None
    assert log.pool["logical-size"] == 3


def test_runs_are_deterministic_and_seeds_differ():
    cfg = _cfg()
    a, b = _run(cfg).summary(), _run(cfg).summary()
    assert a == b
    c = _run(_cfg(seed=5)).summary()
    assert c["accuracy-matrix"] != a["accuracy-matrix"] or c["lambda-mean"] != a["lambda-mean"]


@pytest.mark.parametrize("variant", ["none", "gkd", "tkd", "fdkd", "rdkd"])
def test_every_variant_runs(variant):
    log = _run(_cfg(**{"distill.variant": variant}), flatness=False)
    assert log.matrix.n_steps == 3
    lam = log.summary()["lambda-mean"]
    if variant == "none":
        assert lam[1:] == [None, None]
    else:
        assert all(v > 0 for v in lam[1:])


def test_rdkd_records_sampled_groups():
    log = _run(_cfg(), flatness=False)
    step = log.steps[2]
    assert sum(step.group_counts.values()) == len(step.lambda_trace)
    assert set(step.group_counts) <= {"0", "1", "0,1"}
    assert len(step.lambda_per_epoch) == 3


def test_baselines_use_one_lambda_per_task():
    log = _run(_cfg(**{"distill.variant": "gkd"}), flatness=False)
    trace = log.steps[1].lambda_trace
    assert len(set(trace)) == 1


def test_no_distillation_no_replay_equals_plain_fine_tuning():
    cfg = _cfg(**{"distill.variant": "none", "replay-fraction": 0.0, "num-increments": 1})
    train, _ = load_datasets(cfg)
    task0, task1 = TaskSpec(0, (0, 1)), TaskSpec(1, (2, 3))

    state = train_base(cfg, train, task0, RunStreams.from_seed(cfg.seed))
    train_increment(state, cfg, task1, train)

    # hand-written fine-tuning loop, same streams
    ref = train_base(cfg, train, task0, RunStreams.from_seed(cfg.seed))
    ref.model.expand_head(task1.classes)
    data = train.subset(task1.classes)
    cols = list(range(4))
    opt = T.SGD(ref.model.parameters(), cfg.lr_inc, cfg.momentum, cfg.weight_decay)
    for _ in range(cfg.epochs_inc):
        order = ref.streams.shuffle.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            T.backward(classification_loss(ref.model(data.inputs[idx]), cols, data.labels[idx], ref.model.class_registry))
            opt.step()
    x = train.inputs
    assert np.array_equal(state.model(x).data, ref.model(x).data)


def test_teacher_snapshot_is_not_trained():
    cfg = _cfg()
    train, _ = load_datasets(cfg)
    state = train_base(cfg, train, TaskSpec(0, (0, 1)))
    before = state.model.snapshot()
    x = train.inputs[:5]
    ref = before(x).data.copy()
    train_increment(state, cfg, TaskSpec(1, (2,)), train)
    assert np.array_equal(before(x).data, ref)
    assert not np.array_equal(ref, state.model(x).data[:, :2])


def test_increment_errors():
    cfg = _cfg()
    train, _ = load_datasets(cfg)
    state = train_base(cfg, train, TaskSpec(0, (0, 1)))
    with pytest.raises(ValueError):
        train_increment(state, cfg, TaskSpec(1, (1,)), train)
    with pytest.raises(ValueError):
        train_increment(state, cfg, TaskSpec(1, (9,)), train)


def test_class_count_mismatch():
    cfg = _cfg()
    train, test = load_datasets(_cfg(**{"dataset.num-classes": 4}))
    bad = from_dict({**SMALL, "total-classes": 6, "num-increments": 3,
                     "dataset": {**SMALL["dataset"], "num-classes": 6}})
    with pytest.raises(ConfigError):
        run_experiment(bad, train, test)
    assert cfg.total_classes == 4


def test_order_seed_changes_assignment():
    a = _run(_cfg(), class_order_seed=1, flatness=False)
    b = _run(_cfg(), class_order_seed=2, flatness=False)
    assert a.assignment.tasks != b.assignment.tasks
    assert a.config["class-order-seed"] == 1


def test_scope_and_replay_options_run():
    for over in ({"cls-scope": "new"}, {"distill.kd-on-replay": False}, {"replay-fraction": 0.25},
                 {"model.cosine-head": True}, {"lr-milestones-inc": [1, 2]}):
        log = _run(_cfg(**over), flatness=False)
        assert log.matrix.n_steps == 3


def test_final_loss_and_flatness_recorded():
    log = _run(_cfg())
    assert log.final_train_loss == log.flatness.mean_loss[0]
    assert log.flatness.sigmas == [0.0, 0.01, 0.02, 0.05]


def test_replay_count_rules():
    cfg = _cfg()
    assert replay_count(cfg, 4, 5, 20) == round(32 * 4 / 5)
    assert replay_count(cfg, 4, 5, 0) == 0
    assert replay_count(_cfg(**{"replay-fraction": 0.0}), 4, 5, 20) == 0
    assert replay_count(_cfg(**{"replay-fraction": 0.5}), 4, 5, 20) == 16
    assert replay_count(cfg, 99, 100, 20) == 31


def test_lr_schedule():
    assert lr_at(0, 0.1, [2, 4], 0.1) == 0.1
    assert lr_at(2, 0.1, [2, 4], 0.1) == pytest.approx(0.01)
    assert lr_at(5, 0.1, [2, 4], 0.1) == pytest.approx(0.001)
