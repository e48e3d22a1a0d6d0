import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from datr import numerics as nx
from datr.numerics import (ContractError, DimensionError, NumericError, Tensor, backward,
                           grad_check, grad_check_report, no_grad, precision)

F64 = np.float64


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=F64)


def projection(rng, shape):
    """Random fixed weights so that sum(out * R) has non-degenerate gradients."""
    R = Tensor(rng.normal(size=shape), dtype=F64)
    return lambda out: nx.sum(nx.mul(out, R))


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# ---------------------------------------------------------------- forward values

def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    got = nx.matmul(Tensor(a, dtype=F64), Tensor(b, dtype=F64)).data
    np.testing.assert_allclose(got, matmul_loops(a, b), rtol=1e-12, atol=1e-12)


def test_batched_matmul_broadcasts(rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 6))
    got = nx.matmul(Tensor(a, dtype=F64), Tensor(b, dtype=F64)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], matmul_loops(a[i, j], b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_elementwise_known_values():
    x = Tensor([1.0, -0.5], dtype=F64)
    np.testing.assert_allclose(nx.gelu(x).data, [0.8411919906082768, -0.15428599017485606], rtol=1e-14)
    assert nx.sigmoid(Tensor([2.0], dtype=F64)).data[0] == pytest.approx(0.8807970779778823, rel=1e-14)
    np.testing.assert_array_equal(nx.relu(x).data, [1.0, 0.0])


def test_sigmoid_is_finite_at_extremes():
    out = nx.sigmoid(Tensor([-1000.0, 0.0, 1000.0], dtype=F64)).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    x = rng.normal(size=(3, 7)) * 10
    a = nx.softmax(Tensor(x, dtype=F64)).data
    b = nx.softmax(Tensor(x + 123.0, dtype=F64)).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(a, b, atol=1e-14)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(a, e / e.sum(axis=-1, keepdims=True), atol=1e-15)


def test_take_accumulates_repeated_indices():
    table = Tensor(np.arange(4.0), requires_grad=True, dtype=F64)
    out = nx.take(table, np.array([0, 2, 2, 3, 2]))
    np.testing.assert_array_equal(out.data, [0, 2, 2, 3, 2])
    backward(nx.sum(out))
    np.testing.assert_array_equal(table.grad, [1, 0, 3, 1])


def test_roll_and_concat_values(rng):
    x = rng.normal(size=(2, 4, 4, 3))
    np.testing.assert_array_equal(nx.roll(Tensor(x, dtype=F64), (1, -2), (1, 2)).data,
                                  np.roll(x, (1, -2), (1, 2)))
    y = rng.normal(size=(2, 4, 4, 2))
    np.testing.assert_array_equal(nx.concat([Tensor(x, dtype=F64), Tensor(y, dtype=F64)], -1).data,
                                  np.concatenate([x, y], -1))


def test_default_precision_and_context():
    assert nx.get_dtype() == np.float32
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert nx.get_dtype() == np.float32
    with pytest.raises(ValueError):
        nx.set_dtype(np.int32)


# ---------------------------------------------------------------- backward

def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=F64)
    backward(nx.sum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_function_gives_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=F64)
    c = Tensor(5.0, dtype=F64)
    backward(nx.add(c, 0.0), [x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_non_parameter_leaves_untouched(rng):
    x = Tensor(rng.normal(size=3), dtype=F64)
    w = param(rng, 3)
    backward(nx.sum(nx.mul(x, w)))
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, x.data)


def test_backward_needs_scalar(rng):
    w = param(rng, 3)
    with pytest.raises(ContractError):
        backward(nx.mul(w, 2.0))


def test_shared_subexpression_accumulates():
    x = Tensor(3.0, requires_grad=True, dtype=F64)
    y = nx.mul(x, x)
    backward(nx.add(y, y))  # d/dx 2x^2 = 4x
    assert x.grad == pytest.approx(12.0)


def test_no_grad_records_nothing(rng):
    w = param(rng, 3)
    with no_grad():
        out = nx.sum(nx.mul(w, w))
    assert out._backward is None


def test_deep_chain_does_not_recurse():
    x = Tensor(1.0, requires_grad=True, dtype=F64)
    y = x
    for _ in range(5000):
        y = nx.add(y, 0.0)
    backward(y)
    assert x.grad == 1.0


def test_two_layer_perceptron_matches_finite_differences(rng):
    with precision(F64):
        x = Tensor(rng.normal(size=(5, 4)), dtype=F64)
        w1, b1, w2 = param(rng, 4, 6), param(rng, 6), param(rng, 6, 2)
        loss = lambda: nx.mean(nx.mul(nx.matmul(nx.tanh(nx.add(nx.matmul(x, w1), b1)), w2),
                                      nx.matmul(nx.tanh(nx.add(nx.matmul(x, w1), b1)), w2)))
        assert grad_check(loss, [w1, b1, w2]) < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_op_gradients_with_broadcasting(rng, name):
    a = param(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)), requires_grad=True, dtype=F64)
    op = getattr(nx, name)
    proj = projection(rng, (3, 4))
    assert grad_check(lambda: proj(op(a, b)), [a, b]) < 1e-4


@pytest.mark.parametrize("name", ["exp", "tanh", "relu", "gelu", "sigmoid", "neg"])
def test_unary_op_gradients(rng, name):
    a = param(rng, 4, 5)
    proj = projection(rng, (4, 5))
    assert grad_check(lambda: proj(getattr(nx, name)(a)), [a]) < 1e-4


def test_log_gradient(rng):
    a = Tensor(rng.uniform(0.5, 3.0, size=(6,)), requires_grad=True, dtype=F64)
    proj = projection(rng, (6,))
    assert grad_check(lambda: proj(nx.log(a)), [a]) < 1e-4


def test_shape_op_gradients(rng):
    a = param(rng, 2, 3, 4)
    b = param(rng, 2, 3, 2)
    idx = np.array([0, 5, 5, 23, 7])
    checks = {
        "reshape": (lambda: nx.reshape(a, (6, 4)), (6, 4)),
        "transpose": (lambda: nx.transpose(a, (2, 0, 1)), (4, 2, 3)),
        "concat": (lambda: nx.concat([a, b], -1), (2, 3, 6)),
        "roll": (lambda: nx.roll(a, (1, -1), (1, 2)), (2, 3, 4)),
        "take": (lambda: nx.take(nx.reshape(a, (24,)), idx), (5,)),
        "sum": (lambda: nx.sum(a, axis=1, keepdims=True), (2, 1, 4)),
        "mean": (lambda: nx.mean(a, axis=(0, 2)), (3,)),
        "softmax": (lambda: nx.softmax(a, axis=-1), (2, 3, 4)),
    }
    for name, (fn, shape) in checks.items():
        proj = projection(rng, shape)
        assert grad_check(lambda: proj(fn()), [a, b]) < 1e-4, name


def test_matmul_and_interp_gradients(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    proj = projection(rng, (2, 3, 5))
    assert grad_check(lambda: proj(nx.matmul(a, b)), [a, b]) < 1e-4
    x = param(rng, 1, 3, 4, 2)
    rows, cols = rng.uniform(size=(5, 3)), rng.uniform(size=(6, 4))
    proj = projection(rng, (1, 5, 6, 2))
    assert grad_check(lambda: proj(nx.interp2d(x, rows, cols)), [x]) < 1e-4


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_quadratic_form(rng):
    A = rng.normal(size=(4, 4))
    A = Tensor(A @ A.T, dtype=F64)
    x = param(rng, 4, 1)
    f = lambda: nx.sum(nx.mul(x, nx.matmul(A, x)))
    assert grad_check(f, [x], eps=1e-5) < 1e-6


def test_grad_check_linear_function_is_exact(rng):
    w = Tensor(rng.normal(size=5), dtype=F64)
    x = param(rng, 5)
    assert grad_check(lambda: nx.sum(nx.mul(w, x)), [x]) < 1e-8


def test_grad_check_detects_wrong_gradient(rng):
    x = param(rng, 3)

    def bad_square(a):
        return nx._make(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    assert grad_check(lambda: nx.sum(bad_square(x)), [x]) > 0.4


def test_grad_check_rejects_non_finite(rng):
    x = Tensor([-1.0, 2.0], requires_grad=True, dtype=F64)
    with pytest.raises(NumericError):
        grad_check(lambda: nx.sum(nx.log(x)), [x])
    with pytest.raises(ContractError):
        grad_check(lambda: nx.sum(x), [x], eps=0)


def test_grad_check_report_skips_relu_kinks():
    # x sits 1e-5 from the kink, so +-1e-4 straddles it
    x = Tensor([1e-5, 1.0], requires_grad=True, dtype=F64)
    f = lambda: nx.sum(nx.relu(x))
    plain = grad_check_report(f, [x])
    assert plain.max_error > 0.1 and plain.skipped == 0
    aware = grad_check_report(f, [x], skip_kinks=True)
    assert aware.skipped == 1 and aware.checked == 1 and aware.max_error < 1e-10


def test_grad_check_sampling_limits_coordinates(rng):
    x = param(rng, 50)
    rep = grad_check_report(lambda: nx.sum(nx.mul(x, x)), [x], sample=7)
    assert rep.checked == 7


# ---------------------------------------------------------------- properties

finite = st.floats(-3, 3, allow_nan=False, width=64)


@given(arrays(F64, (3, 4), elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(xv, a, b):
    x1 = Tensor(xv, requires_grad=True, dtype=F64)
    f = lambda t: nx.sum(nx.tanh(t))
    g = lambda t: nx.sum(nx.mul(t, t))
    backward(f(x1))
    gf = x1.grad
    x1.grad = None
    backward(g(x1))
    gg = x1.grad
    x1.grad = None
    backward(nx.add(nx.mul(f(x1), a), nx.mul(g(x1), b)))
    np.testing.assert_allclose(x1.grad, a * gf + b * gg, atol=1e-10)


@given(arrays(F64, (2, 3), elements=finite), arrays(F64, (3,), elements=finite))
def test_unbroadcast_gradient_shapes(av, bv):
    a = Tensor(av, requires_grad=True, dtype=F64)
    b = Tensor(bv, requires_grad=True, dtype=F64)
    backward(nx.sum(nx.mul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, av.sum(axis=0), atol=1e-12)


@given(arrays(F64, (4, 5), elements=finite))
def test_forward_is_deterministic(xv):
    x = Tensor(xv, dtype=F64)
    run = lambda: nx.softmax(nx.gelu(nx.matmul(x, nx.transpose(x, (1, 0))))).data
    assert run().tobytes() == run().tobytes()
