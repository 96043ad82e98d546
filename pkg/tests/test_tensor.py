import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from meshdream import tensor as T
from meshdream.tensor import ShapeError, Tensor, backward, gradcheck, no_grad

from oracles import op_catalog, random_gradchecks


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- matmul ----------------------------------------------------------------
def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    err = gradcheck(lambda a, b: T.reduce_sum(T.matmul(a, b) * T.matmul(a, b)),
                    [rng.normal(size=(4, 5)), rng.normal(size=(5, 3))])
    assert err < 1e-6


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# -- softmax ---------------------------------------------------------------
def test_softmax_uniform():
    out = T.softmax(Tensor(np.full(7, 0.3)), axis=0).data
    assert np.allclose(out, 1 / 7, rtol=0, atol=1e-15)


def test_softmax_analytic_pair():
    out = T.softmax(Tensor([0.0, math.log(3.0)]), axis=0).data
    assert np.allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_gradient():
    x = np.random.default_rng(2).normal(size=10)
    w = np.random.default_rng(3).normal(size=10)
    assert gradcheck(lambda a: T.reduce_sum(T.softmax(a, axis=0) * Tensor(w)), [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=1).data
    assert np.all(out > 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)


def test_softmax_stable_for_large_inputs():
    out = T.softmax(Tensor([1000.0, 1000.0]), axis=0).data
    assert np.array_equal(out, [0.5, 0.5])


# -- elementwise suite ----------------------------------------------------
def test_abs_value_and_subgradient_at_zero():
    assert T.absolute(Tensor(-3.5)).item() == 3.5
    x = leaf([0.0, -2.0, 2.0])
    g = backward(T.reduce_sum(T.absolute(x)))[x]
    assert g.tolist() == [0.0, -1.0, 1.0]


def test_concat_shape():
    out = T.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
    assert out.shape == (2, 8)


def test_mean_gradient_is_one_over_n():
    x = leaf(np.arange(12.0).reshape(3, 4))
    g = backward(T.reduce_mean(x))[x]
    assert np.all(g == 1.0 / 12)


def test_reduce_max_min_tie_break_first_index():
    x = leaf([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]])
    g = backward(T.reduce_max(x))[x]
    assert g.tolist() == [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
    g = backward(T.reduce_sum(T.reduce_min(x, axis=1)))[x]
    assert g.tolist() == [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]


def test_broadcasting_beyond_scalar_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(3))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) * np.zeros(3)


def test_scalar_operands_allowed():
    x = leaf([1.0, 2.0])
    y = 2.0 * x + 1.0 - x / 2.0
    assert y.data.tolist() == [2.5, 4.0]


# -- backward ---------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(4).normal(size=(3, 2)))
    assert np.array_equal(backward(T.reduce_sum(x))[x], np.ones((3, 2)))


def test_backward_square():
    x = leaf([1.0, 2.0])
    assert backward(T.reduce_sum(x * x))[x].tolist() == [2.0, 4.0]


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(5)
    shapes = [(4, 3), (3, 8), (8,), (8, 8), (8,), (8, 1)]

    def mlp(x, w0, b0, w1, b1, w2):
        h = T.tanh(T.matmul(x, w0) + b0.broadcast_to((4, 8)))
        h = T.silu(T.matmul(h, w1) + b1.broadcast_to((4, 8)))
        return T.reduce_sum(T.matmul(h, w2))

    assert gradcheck(mlp, [rng.normal(size=s) for s in shapes]) < 1e-5


def test_backward_rejects_non_scalar_root():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    results = []
    for _ in range(2):
        la, lb = leaf(a), leaf(b)
        g = backward(T.reduce_sum(T.softmax(T.matmul(la, lb), axis=1) * T.matmul(la, lb)))
        results.append((g[la].tobytes(), g[lb].tobytes()))
    assert results[0] == results[1]


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x
    g = backward(T.reduce_sum(y + y * x))[x]
    assert g.tolist() == [2 * 3.0 + 3 * 9.0]


# -- graph and values ----------------------------------------------------
def test_tensor_values_are_immutable():
    src = np.array([1.0, 2.0])
    x = Tensor(src)
    src[0] = 99.0
    assert x.data[0] == 1.0
    with pytest.raises(ValueError):
        x.data[0] = 5.0
    assert src.flags.writeable


def test_graph_nodes_in_topological_order():
    x = leaf([1.0])
    y = x * 2.0
    z = T.exp(y) + y
    assert x.node is None
    assert y.node < z.node


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y.node is None


def test_data_is_fp64():
    assert Tensor(np.arange(3, dtype=np.int32)).data.dtype == np.float64


# -- randomized sweep -----------------------------------------------------
def test_catalog_covers_required_ops():
    names = {n for n, _, _ in op_catalog()}
    required = {"add", "sub", "mul", "scalar-mul", "abs", "exp", "sqrt", "clamp", "sigmoid", "silu",
                "sum-axis", "mean", "reshape", "concat", "slice", "reduce-min", "reduce-max", "matmul",
                "softmax"}
    assert required <= names


def test_random_gradchecks_all_ops():
    worst = {}
    for name, err in random_gradchecks(100, seed=11):
        worst[name] = max(worst.get(name, 0.0), err)
    assert max(worst.values()) < 1e-5, worst


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_product_rule_property(a, b):
    la, lb = leaf(a), leaf(b)
    g = backward(T.reduce_sum(la * lb))
    assert np.array_equal(g[la], b) and np.array_equal(g[lb], a)
