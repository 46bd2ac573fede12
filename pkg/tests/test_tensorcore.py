import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowforge import tensorcore as tc


def test_add_and_matmul_examples():
    assert tc.add(tc.const([1.0, 2.0]), tc.const([3.0, 4.0])).value.tolist() == [4.0, 6.0]
    out = tc.matmul(tc.const([[1.0, 2.0]]), tc.const([[3.0], [4.0]]))
    assert out.shape == (1, 1) and out.item() == 11.0
    assert tc.tanh(tc.const([0.0])).value.tolist() == [0.0]


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        tc.Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        tc.leaf([np.inf])


def test_shape_mismatch_names_shapes():
    with pytest.raises(tc.ShapeError, match=r"\[2\].*\[3\]"):
        tc.add(tc.const([1.0, 2.0]), tc.const([1.0, 2.0, 3.0]))
    with pytest.raises(tc.ShapeError):
        tc.matmul(tc.const(np.ones((2, 3))), tc.const(np.ones((2, 3))))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown operator"):
        tc.forward_op("conv", (tc.const([1.0]),))


def test_scalar_broadcast_only():
    out = tc.mul(tc.const(2.0), tc.const([[1.0, 2.0], [3.0, 4.0]]))
    assert out.value.tolist() == [[2.0, 4.0], [6.0, 8.0]]
    with pytest.raises(tc.ShapeError):
        tc.add(tc.const(np.ones((2, 1))), tc.const(np.ones((2, 3))))


def test_backward_examples():
    w = tc.leaf([3.0])
    g = tc.backward(tc.sum_all(tc.square(w)))
    assert g[w].tolist() == [6.0]
    w = tc.leaf(np.ones(4))
    assert tc.backward(tc.mean(w))[w].tolist() == [0.25] * 4


def test_backward_rejects_non_scalar():
    with pytest.raises(tc.ShapeError):
        tc.backward(tc.square(tc.leaf([1.0, 2.0])))


def test_unreachable_leaf_gets_zero_grad():
    w, v = tc.leaf([1.0, 2.0]), tc.leaf([5.0])
    g = tc.backward(tc.sum_all(w), [w, v])
    assert g[v].tolist() == [0.0]


def test_two_layer_tanh_network_seed_7():
    gen = np.random.default_rng(7)
    x = gen.standard_normal((3, 4))
    w2 = gen.standard_normal((5, 2))

    def f(w1):
        h = tc.tanh(tc.matmul(tc.const(x), w1))
        return tc.sum_all(tc.square(tc.matmul(h, tc.const(w2))))

    assert tc.finite_diff_check(f, gen.standard_normal((4, 5))) < 1e-6


def test_finite_diff_check_examples():
    assert tc.finite_diff_check(lambda w: tc.sum_all(tc.square(w)), np.array([1.0, 2.0])) < 1e-8
    assert tc.finite_diff_check(lambda w: tc.const(3.0), np.array([1.0, -4.0])) == 0.0
    a = np.array([0.3, -1.2, 2.5])
    assert tc.finite_diff_check(lambda w: tc.sum_all(tc.mul(w, tc.const(a))), np.array([1.0, 2.0, 3.0])) < 1e-10
    with pytest.raises(ValueError):
        tc.finite_diff_check(lambda w: tc.sum_all(w), np.ones(2), step=0.0)


def test_finite_diff_check_reports_non_finite():
    def f(w):
        if not isinstance(w, tc.Node) or not w.requires_grad:
            raise FloatingPointError("boom")
        return tc.sum_all(w)

    with pytest.raises(FloatingPointError):
        tc.finite_diff_check(f, np.ones(2))


def _unary(kind):
    return {
        "tanh": tc.tanh,
        "relu": tc.relu,
        "sigmoid": tc.sigmoid,
        "square": tc.square,
        "exp": tc.exp,
        "log": lambda a: tc.log(tc.add(tc.square(a), tc.const(0.5))),
        "scale": lambda a: tc.scale(a, -1.7),
        "slice": lambda a: tc.slice_last(a, 1, 3),
        "mean": lambda a: tc.scale(tc.mean(a), 3.0),
    }[kind]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1),
       kind=st.sampled_from(["tanh", "relu", "sigmoid", "square", "exp", "log", "scale", "slice", "mean"]))
def test_unary_gradients_match_finite_differences(seed, kind):
    gen = np.random.default_rng(seed)
    x = gen.uniform(-1.5, 1.5, size=(2, 4))
    if kind == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep clear of the kink
    weights = gen.standard_normal((2, 4)) if kind not in ("slice", "mean") else None

    def f(w):
        out = _unary(kind)(w)
        if weights is not None:
            out = tc.mul(out, tc.const(weights))
        return tc.sum_all(out)

    assert tc.finite_diff_check(f, x) < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["add", "sub", "mul", "matmul", "concat"]))
def test_binary_gradients_match_finite_differences(seed, kind):
    gen = np.random.default_rng(seed)
    a = gen.standard_normal((3, 2))
    b = gen.standard_normal((2, 4) if kind == "matmul" else (3, 2))
    c = gen.standard_normal((3, 4) if kind in ("matmul", "concat") else (3, 2))
    op = {"add": tc.add, "sub": tc.sub, "mul": tc.mul, "matmul": tc.matmul, "concat": tc.concat}[kind]

    def left(w):
        return tc.sum_all(tc.mul(op(w, tc.const(b)), tc.const(c)))

    def right(w):
        return tc.sum_all(tc.mul(op(tc.const(a), w), tc.const(c)))

    assert tc.finite_diff_check(left, a) < 1e-4
    assert tc.finite_diff_check(right, b) < 1e-4


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(-8, 8, allow_nan=False).filter(lambda v: abs(v) > 1e-3))
def test_backward_is_linear_in_loss_scale(seed, alpha):
    x = np.random.default_rng(seed).standard_normal((2, 3))
    w1, w2 = tc.leaf(x), tc.leaf(x)
    g1 = tc.backward(tc.sum_all(tc.tanh(w1)))[w1]
    g2 = tc.backward(tc.scale(tc.sum_all(tc.tanh(w2)), alpha))[w2]
    np.testing.assert_allclose(g2, alpha * g1, rtol=1e-15, atol=0)


def test_graph_evaluation_is_deterministic():
    def run():
        x = np.random.default_rng(3).standard_normal((4, 4))
        w = tc.leaf(x)
        loss = tc.mean(tc.sigmoid(tc.matmul(w, w)))
        return loss.value.copy(), tc.backward(loss)[w]

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()


def test_log_rejects_non_positive_and_exp_overflow():
    with pytest.raises(ValueError):
        tc.log(tc.const([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        tc.exp(tc.const([1e4]))


def test_node_operators_build_graph():
    w = tc.leaf([1.0, 2.0])
    loss = tc.sum_all((w * 3.0 - 1.0) + w)
    assert loss.item() == 10.0
    assert tc.backward(loss)[w].tolist() == [4.0, 4.0]
