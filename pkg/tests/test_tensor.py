import numpy as np
import pytest

from mtopt.tensor import (Graph, GraphError, NonFiniteValue, ShapeMismatch,
                          backward, evaluate, finite_difference_grad)


def scalar_square():
    g = Graph()
    x = g.leaf("x")
    y = g.mark_output(g.reduce_sum(g.mul(x, x)))
    return g, y


def test_scalar_square_forward():
    g, y = scalar_square()
    out = evaluate(g, {"x": np.array(3.0)})
    assert float(out[y]) == 9.0


def test_matmul_of_ones_gives_row_sums():
    g = Graph()
    out = g.mark_output(g.matmul(g.leaf("a"), g.leaf("b")))
    vals = evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((3, 1))})
    assert vals[out].shape == (2, 1)
    assert np.all(vals[out] == 3.0)


def test_mse_of_identical_inputs_is_zero():
    g = Graph()
    out = g.mark_output(g.squared_error(g.leaf("p"), g.leaf("t")))
    vals = evaluate(g, {"p": np.array([1.0, 2.0]), "t": np.array([1.0, 2.0])})
    assert float(vals[out]) == 0.0


def test_backward_square_at_three():
    g, y = scalar_square()
    evaluate(g, {"x": np.array(3.0)})
    grads = backward(g, y, {"x"})
    assert float(grads["x"]) == 6.0


def test_backward_half_square_residual():
    # L = 0.5 * (theta - a)^2 at theta=0, a=1 -> dL/dtheta = -1
    g = Graph()
    r = g.sub(g.leaf("theta"), g.const(np.array(1.0)))
    loss = g.mark_output(g.scale(g.mul(r, r), 0.5))
    evaluate(g, {"theta": np.array(0.0)})
    grads = backward(g, loss, {"theta"})
    assert float(grads["theta"]) == -1.0


def test_finite_difference_square():
    grads = finite_difference_grad(lambda b: float(b["x"]) ** 2, {"x": np.array(3.0)}, 1e-4)
    assert abs(float(grads["x"]) - 6.0) < 1e-7


def test_finite_difference_relu_away_from_kink():
    grads = finite_difference_grad(lambda b: max(float(b["x"]), 0.0), {"x": np.array(1.0)}, 1e-4)
    assert float(grads["x"]) == pytest.approx(1.0, abs=1e-12)


def _two_layer_mlp(rng, n=4, din=3, width=5):
    g = Graph()
    h = g.tanh(g.bias_add(g.matmul(g.leaf("x"), g.leaf("w0")), g.leaf("b0")))
    pred = g.bias_add(g.matmul(h, g.leaf("w1")), g.leaf("b1"))
    loss = g.mark_output(g.squared_error(pred, g.leaf("t")))
    bindings = {
        "x": rng.standard_normal((n, din)),
        "w0": rng.standard_normal((din, width)) / np.sqrt(din),
        "b0": rng.standard_normal(width) * 0.1,
        "w1": rng.standard_normal((width, 2)) / np.sqrt(width),
        "b1": rng.standard_normal(2) * 0.1,
        "t": rng.standard_normal((n, 2)),
    }
    return g, loss, bindings


@pytest.mark.parametrize("seed", range(20))
def test_mlp_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g, loss, bindings = _two_layer_mlp(rng)
    evaluate(g, bindings)
    wanted = {"w0", "b0", "w1", "b1"}
    grads = backward(g, loss, wanted)

    def f(b):
        return float(evaluate(g, b)[loss])

    fd = finite_difference_grad(f, bindings, 1e-5)
    evaluate(g, bindings)  # leave the cache consistent with the bindings
    for name in wanted:
        scale = max(1.0, float(np.max(np.abs(fd[name]))))
        assert np.max(np.abs(grads[name] - fd[name])) / scale < 1e-5


def _op_case(kind, rng):
    """One scalarized graph exercising a single op kind, plus its bindings."""
    g = Graph()
    n, m, p = (int(rng.integers(2, 5)) for _ in range(3))
    if kind == "matmul":
        out = g.matmul(g.leaf("a"), g.leaf("b"))
        bindings = {"a": rng.standard_normal((n, m)), "b": rng.standard_normal((m, p))}
    elif kind in ("add", "sub", "mul"):
        op = getattr(g, kind)
        out = op(g.leaf("a"), g.leaf("b"))
        bindings = {"a": rng.standard_normal((n, m)), "b": rng.standard_normal((n, m))}
    elif kind == "bias_add":
        out = g.bias_add(g.leaf("a"), g.leaf("b"))
        bindings = {"a": rng.standard_normal((n, m)), "b": rng.standard_normal(m)}
    elif kind in ("relu", "tanh"):
        out = getattr(g, kind)(g.leaf("a"))
        a = rng.standard_normal((n, m))
        a = a + np.sign(a) * 1e-3  # keep clear of the relu kink
        bindings = {"a": a}
    elif kind in ("reduce_sum", "reduce_mean"):
        out = getattr(g, kind)(g.leaf("a"))
        bindings = {"a": rng.standard_normal((n, m))}
    elif kind == "squared_error":
        out = g.squared_error(g.leaf("a"), g.leaf("b"))
        bindings = {"a": rng.standard_normal((n, m)), "b": rng.standard_normal((n, m))}
    elif kind == "softmax_xent":
        t = rng.uniform(0.1, 1.0, size=(n, m))
        t /= t.sum(axis=1, keepdims=True)
        out = g.softmax_cross_entropy(g.leaf("a"), g.leaf("b"))
        bindings = {"a": rng.standard_normal((n, m)), "b": t}
    else:
        raise AssertionError(kind)
    if kind not in ("reduce_sum", "reduce_mean", "squared_error", "softmax_xent"):
        out = g.reduce_sum(out)
    return g, g.mark_output(out), bindings


ALL_KINDS = ["matmul", "add", "sub", "mul", "bias_add", "relu", "tanh",
             "reduce_sum", "reduce_mean", "squared_error", "softmax_xent"]


@pytest.mark.parametrize("case", range(100))
def test_every_op_kind_matches_finite_differences(case):
    kind = ALL_KINDS[case % len(ALL_KINDS)]
    rng = np.random.default_rng(1000 + case)
    g, loss, bindings = _op_case(kind, rng)
    evaluate(g, bindings)
    grads = backward(g, loss, set(bindings))

    def f(b):
        return float(evaluate(g, b)[loss])

    fd = finite_difference_grad(f, bindings, 1e-5)
    for name in bindings:
        scale = max(1.0, float(np.max(np.abs(fd[name]))))
        assert np.max(np.abs(grads[name] - fd[name])) / scale < 1e-5, (kind, name)


def test_evaluate_is_deterministic_bitwise():
    rng = np.random.default_rng(7)
    g, loss, bindings = _two_layer_mlp(rng)
    a = evaluate(g, bindings)[loss].copy()
    b = evaluate(g, bindings)[loss].copy()
    assert a.tobytes() == b.tobytes()


def test_unwanted_blocks_absent_from_gradient_map():
    rng = np.random.default_rng(11)
    g, loss, bindings = _two_layer_mlp(rng)
    evaluate(g, bindings)
    grads = backward(g, loss, {"w1"})
    assert set(grads) == {"w1"}


def test_shape_mismatch_names_op_and_shapes():
    g = Graph()
    g.mark_output(g.matmul(g.leaf("a"), g.leaf("b")))
    with pytest.raises(ShapeMismatch, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((2, 1))})


def test_non_finite_result_fails():
    g = Graph()
    g.mark_output(g.reduce_sum(g.mul(g.leaf("x"), g.leaf("x"))))
    with pytest.raises(NonFiniteValue):
        evaluate(g, {"x": np.array([1e200, 1e200])})


def test_non_scalar_loss_rejected():
    g = Graph()
    out = g.mark_output(g.add(g.leaf("a"), g.leaf("b")))
    evaluate(g, {"a": np.ones(2), "b": np.ones(2)})
    with pytest.raises(GraphError, match="not scalar"):
        backward(g, out, {"a"})


def test_wanted_must_be_a_leaf():
    g, loss = scalar_square()
    evaluate(g, {"x": np.array(2.0)})
    with pytest.raises(GraphError, match="not leaves"):
        backward(g, loss, {"nope"})


def test_unbound_leaf_rejected():
    g, _ = scalar_square()
    with pytest.raises(GraphError, match="unbound"):
        evaluate(g, {})


def test_finite_difference_requires_positive_h():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda b: 0.0, {"x": np.array(1.0)}, 0.0)
