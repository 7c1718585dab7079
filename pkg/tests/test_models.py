import numpy as np
import pytest

from mtopt.models import (Batch, ModelError, ParamPartition, QuadraticModel,
                          TaskDef, TaskSuite, build_shared_trunk, make_suite,
                          restore, snapshot)
from mtopt.optim import Adam
from mtopt.tensor import backward, evaluate


def scalar_pair(a1=1.0, a2=1.0, with_task_params=False):
    """Two scalar tasks L_i = 0.5*(theta_s [+ theta_i] - a_i)^2."""
    suite = make_suite(2, "quadratic")
    width = 1 if with_task_params else 0
    a = {1: np.array([[1.0]]), 2: np.array([[1.0]])}
    c = {1: np.ones((1, width)), 2: np.ones((1, width))}
    b = {1: np.array([a1]), 2: np.array([a2])}
    return QuadraticModel(suite, a, c, b), Batch(None, {}, 0)


def test_suite_validation():
    with pytest.raises(ModelError, match="at least 2"):
        TaskSuite((TaskDef(1),))
    with pytest.raises(ModelError, match="contiguous"):
        TaskSuite((TaskDef(1), TaskDef(3)))
    with pytest.raises(ModelError, match="positive"):
        TaskSuite((TaskDef(1), TaskDef(2, weight=0.0)))


def test_partition_rejects_duplicate_blocks():
    with pytest.raises(ModelError, match="more than one"):
        ParamPartition(shared={"w": np.zeros(2)}, per_task={1: {"w": np.zeros(2)}})


def test_trunk_structure_and_determinism():
    suite = make_suite(3)
    m1 = build_shared_trunk(8, 2, suite, seed=5)
    m2 = build_shared_trunk(8, 2, suite, seed=5)
    assert len(m1.partition.shared) == 4  # 2 layers x (weight, bias)
    assert sorted(m1.partition.per_task) == [1, 2, 3]
    for name, arr in m1.partition.all_blocks().items():
        assert arr.tobytes() == m2.partition.all_blocks()[name].tobytes()


def test_trunk_zero_input_zero_heads_gives_zero_prediction_loss():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=0, in_dim=3)
    for tid in suite.ids:
        for name in model.partition.per_task[tid]:
            model.partition.set_block(name, np.zeros_like(model.partition.block(name)))
    batch = Batch(np.zeros((5, 3)), {1: np.ones((5, 1)), 2: np.zeros((5, 1))}, 0)
    losses = model.forward_all(batch)
    # heads emit exactly 0, so each loss is the loss of the zero prediction
    assert losses[1] == pytest.approx(1.0)
    assert losses[2] == 0.0


def test_forward_does_not_mutate_parameters():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=1, in_dim=2)
    before = {k: v.copy() for k, v in model.partition.all_blocks().items()}
    batch = Batch(np.ones((3, 2)), {1: np.ones((3, 1)), 2: np.ones((3, 1))}, 0)
    model.forward_all(batch)
    for k, v in model.partition.all_blocks().items():
        assert v.tobytes() == before[k].tobytes()


def test_duplicated_rows_leave_mean_losses_unchanged():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=2, in_dim=2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2))
    t = {1: rng.standard_normal((4, 1)), 2: rng.standard_normal((4, 1))}
    one = model.forward_all(Batch(x, t, 0))
    two = model.forward_all(Batch(np.vstack([x, x]), {k: np.vstack([v, v]) for k, v in t.items()}, 1))
    for tid in suite.ids:
        assert one[tid] == pytest.approx(two[tid], rel=1e-12)


def test_quadratic_hand_values_and_stationarity():
    model, batch = scalar_pair()
    losses = model.forward_all(batch)
    assert losses == {1: 0.5, 2: 0.5}
    grads = model.backward_group((1,), {1: 1.0, 2: 1.0})
    assert grads["shared.theta"] == pytest.approx(np.array([-1.0]))
    # joint least-squares solution: theta_s = 1 -> summed shared gradient is 0
    model.partition.set_block("shared.theta", np.array([1.0]))
    model.forward_all(batch)
    g = model.backward_group((1, 2), {1: 1.0, 2: 1.0})
    assert g["shared.theta"] == pytest.approx(np.array([0.0]))


def test_quadratic_loss_matches_direct_formula():
    rng = np.random.default_rng(3)
    suite = make_suite(2, "quadratic")
    a = {t: rng.standard_normal((5, 3)) for t in (1, 2)}
    c = {t: rng.standard_normal((5, 2)) for t in (1, 2)}
    b = {t: rng.standard_normal(5) for t in (1, 2)}
    model = QuadraticModel(suite, a, c, b)
    model.partition.set_block("shared.theta", rng.standard_normal(3))
    model.partition.set_block("task.1.theta", rng.standard_normal(2))
    losses = model.forward_all(None)
    for t in (1, 2):
        s = model.partition.shared["shared.theta"]
        ti = model.partition.per_task[t][f"task.{t}.theta"]
        direct = 0.5 * np.sum((a[t] @ s + c[t] @ ti - b[t]) ** 2)
        assert abs(losses[t] - direct) < 1e-12


def test_quadratic_analytic_gradient_matches_tape():
    rng = np.random.default_rng(4)
    suite = make_suite(3, "quadratic")
    a = {t: rng.standard_normal((6, 4)) for t in suite.ids}
    c = {t: rng.standard_normal((6, 2)) for t in suite.ids}
    b = {t: rng.standard_normal(6) for t in suite.ids}
    model = QuadraticModel(suite, a, c, b)
    model.partition.set_block("shared.theta", rng.standard_normal(4))
    model.forward_all(None)
    analytic = model.backward_group((1, 2, 3), {1: 1.0, 2: 1.0, 3: 1.0})

    graph, loss_nodes, bindings = model.tape_graph()
    evaluate(graph, bindings)
    tape = backward(graph, {nid: 1.0 for nid in loss_nodes.values()},
                    set(bindings))
    assert np.max(np.abs(tape["shared.theta2d"].ravel() - analytic["shared.theta"])) < 1e-10
    for t in suite.ids:
        assert np.max(np.abs(tape[f"task.{t}.theta2d"].ravel()
                             - analytic[f"task.{t}.theta"])) < 1e-10


def test_dimension_mismatch_rejected():
    suite = make_suite(2, "quadratic")
    a = {1: np.ones((3, 2)), 2: np.ones((3, 2))}
    c = {1: np.ones((4, 1)), 2: np.ones((3, 1))}  # task 1 rows disagree
    b = {1: np.ones(3), 2: np.ones(3)}
    with pytest.raises(ModelError, match="task 1"):
        QuadraticModel(suite, a, c, b)


def test_snapshot_restore_round_trip_bitwise():
    suite = make_suite(2)
    model = build_shared_trunk(4, 2, suite, seed=9, in_dim=3)
    batch = Batch(np.ones((2, 3)), {1: np.ones((2, 1)), 2: np.ones((2, 1))}, 0)
    base = model.forward_all(batch)
    blocks = model.partition.block_ids((1, 2))
    snap = snapshot(model, blocks)
    for name in blocks:
        model.partition.set_block(name, model.partition.block(name) + 0.5)
    assert model.forward_all(batch) != base
    restore(model, snap)
    again = model.forward_all(batch)
    assert all(again[t] == base[t] for t in suite.ids)


def test_snapshot_scoped_to_shared_leaves_heads_alone():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=10, in_dim=2)
    snap = snapshot(model, model.partition.block_ids())  # shared only
    head = model.partition.block("head.1.w")
    head_before = head.copy()
    model.partition.set_block("head.1.w", head + 1.0)
    restore(model, snap)
    assert model.partition.block("head.1.w") == pytest.approx(head_before + 1.0)


def test_snapshot_round_trips_optimizer_moments():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=11, in_dim=2)
    opt = Adam()
    batch = Batch(np.ones((2, 2)), {1: np.ones((2, 1)), 2: np.ones((2, 1))}, 0)
    model.forward_all(batch)
    grads = model.backward_group((1, 2), {1: 1.0, 2: 1.0})
    opt.apply(model.partition, grads, 0.1)
    blocks = model.partition.block_ids((1, 2))
    snap = snapshot(model, blocks, opt)
    saved = {k: (v[0].copy(), v[1].copy(), v[2]) for k, v in opt.moments.items()}
    model.forward_all(batch)
    opt.apply(model.partition, model.backward_group((1, 2), {1: 1.0, 2: 1.0}), 0.1)
    restore(model, snap, opt)
    for name, (m, v, t) in saved.items():
        m2, v2, t2 = opt.moments[name]
        assert t2 == t and m2.tobytes() == m.tobytes() and v2.tobytes() == v.tobytes()


def test_restore_onto_mismatched_blocks_fails():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=12, in_dim=2)
    snap = snapshot(model, ["trunk.0.w"])
    snap.blocks["nope"] = np.zeros(2)
    with pytest.raises(ModelError, match="unknown parameter block"):
        restore(model, snap)


def test_missing_target_is_reported_with_task_id():
    suite = make_suite(2)
    model = build_shared_trunk(4, 1, suite, seed=13, in_dim=2)
    with pytest.raises(ModelError, match="task 2"):
        model.forward_all(Batch(np.ones((2, 2)), {1: np.ones((2, 1))}, 7))


def test_batch_row_count_validation():
    with pytest.raises(ModelError, match="task 1"):
        Batch(np.ones((3, 2)), {1: np.ones((2, 1))}, 0)
