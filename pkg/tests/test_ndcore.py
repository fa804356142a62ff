import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outcome_align.ndcore import OPS, ShapeError, Tape, finite_difference_gradient, gradient_discrepancy


def test_sigmoid_of_zero():
    t = Tape()
    assert float(t.value(t.sigmoid(t.const(0.0)))) == 0.5


def test_matmul_shape():
    t = Tape()
    out = t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((3, 1))))
    assert t.value(out).shape == (2, 1)


def test_mean_example():
    t = Tape()
    assert float(t.value(t.mean(t.const([1.0, 2.0, 3.0, 6.0])))) == 3.0


def test_square_gradient():
    t = Tape()
    x = t.leaf(3.0)
    assert float(t.backward(t.square(x))[x]) == 6.0


def test_sum_gradient_is_ones():
    t = Tape()
    v = t.leaf(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(t.backward(t.sum(v))[v], np.ones((3, 4)))


def test_sigmoid_gradient_at_zero():
    t = Tape()
    x = t.leaf(0.0)
    assert float(t.backward(t.sigmoid(x))[x]) == 0.25


def test_shape_error_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as info:
        t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert "(2, 3)" in str(info.value)


def test_add_rejects_broadcast():
    t = Tape()
    with pytest.raises(ShapeError):
        t.add(t.const(np.ones((2, 3))), t.const(np.ones((1, 3))))


def test_backward_needs_scalar_root():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        t.backward(t.square(x))


def test_non_recording_tape_refuses_backward():
    t = Tape(record=False)
    x = t.leaf(2.0)
    with pytest.raises(RuntimeError):
        t.backward(t.square(x))


def test_unreachable_leaf_gets_zeros():
    t = Tape()
    x = t.leaf(2.0)
    y = t.leaf(np.ones((2, 2)))
    grads = t.backward(t.square(x))
    np.testing.assert_array_equal(grads[y], np.zeros((2, 2)))


def test_values_are_read_only():
    t = Tape()
    x = t.leaf(np.ones(2))
    with pytest.raises(ValueError):
        t.value(x)[0] = 5.0


def test_fd_quadratic():
    g = finite_difference_gradient(lambda x: float(x ** 2), np.array(3.0), 1e-5)
    assert abs(float(g) - 6.0) < 1e-8


def test_fd_constant():
    g = finite_difference_gradient(lambda x: 1.5, np.ones((2, 3)))
    np.testing.assert_array_equal(g, np.zeros((2, 3)))


def test_fd_norm_squared():
    g = finite_difference_gradient(lambda x: float(x @ x), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: 0.0, np.ones(2), h=0.0)


def test_fd_non_finite_names_coordinate():
    def f(x):
        return float("inf") if x[1] > 1.0 else 0.0
    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        finite_difference_gradient(f, np.array([1.0, 1.0]), h=1e-3)


# one builder per op: (inputs drawn from rng) -> (leaf arrays, scalar-producing fn)
def _case(op, rng, n, k):
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    r = lambda *s: rng.normal(size=s)
    readout = r(n, k)
    cases = {
        "add": ([r(n, k), r(n, k)], lambda t, a, b: t.add(a, b)),
        "subtract": ([r(n, k), r(n, k)], lambda t, a, b: t.subtract(a, b)),
        "multiply": ([r(n, k), r(n, k)], lambda t, a, b: t.multiply(a, b)),
        "divide": ([r(n, k), pos(n, k)], lambda t, a, b: t.divide(a, b)),
        "matmul": ([r(n, 3), r(3, k)], lambda t, a, b: t.matmul(a, b)),
        "add_row": ([r(n, k), r(1, k)], lambda t, a, b: t.add_row(a, b)),
        "sigmoid": ([r(n, k)], lambda t, a: t.sigmoid(a)),
        "tanh": ([r(n, k)], lambda t, a: t.tanh(a)),
        "relu": ([r(n, k)], lambda t, a: t.relu(a)),
        "log": ([pos(n, k)], lambda t, a: t.log(a)),
        "square": ([r(n, k)], lambda t, a: t.square(a)),
        "sum": ([r(n, k)], lambda t, a: t.scale(t.sum(a), 1.0)),
        "mean": ([r(n, k)], lambda t, a: t.scale(t.mean(a), 1.0)),
        "scale": ([r(n, k)], lambda t, a: t.scale(a, -1.7)),
        "concat": ([r(n, 2), r(n, k - 2 if k > 2 else 1)], lambda t, a, b: t.concat(a, b)),
        "clip": ([r(n, k)], lambda t, a: t.clip(a, -0.5, 0.5)),
    }
    inputs, fn = cases[op]
    if op == "concat":
        readout = r(n, inputs[0].shape[1] + inputs[1].shape[1])
    return inputs, fn, readout


def _readout_scalar(t, node, readout):
    v = t.value(node)
    if v.size == 1:
        return t.sum(node)
    return t.sum(t.multiply(node, t.const(readout.reshape(v.shape) if readout.size == v.size
                                          else np.ones(v.shape))))


def _kink_free(op, arrays):
    if op == "relu":
        return np.all(np.abs(arrays[0]) > 1e-3)
    if op == "clip":
        return np.all(np.abs(np.abs(arrays[0]) - 0.5) > 1e-3)
    return True


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), k=st.integers(3, 8))
def test_op_gradients_match_finite_differences(op, seed, n, k):
    rng = np.random.default_rng(seed)
    arrays, fn, readout = _case(op, rng, n, k)
    if not _kink_free(op, arrays):
        return

    def scalar(t, nodes):
        return _readout_scalar(t, fn(t, *nodes), readout)

    t = Tape()
    leaves = [t.leaf(a) for a in arrays]
    grads = t.backward(scalar(t, leaves))
    for i, a in enumerate(arrays):
        def f(x, i=i):
            tt = Tape(record=False)
            nodes = [tt.const(x if j == i else arrays[j]) for j in range(len(arrays))]
            return float(tt.value(scalar(tt, nodes)))
        numeric = finite_difference_gradient(f, a, 1e-6)
        assert gradient_discrepancy(grads[leaves[i]], numeric) < 1e-4


def test_every_op_is_covered():
    rng = np.random.default_rng(0)
    for op in OPS:
        _case(op, rng, 2, 3)


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))

    def run():
        t = Tape()
        x, y = t.leaf(a), t.leaf(b)
        root = t.sum(t.tanh(t.matmul(x, y)))
        g = t.backward(root)
        return g[x], g[y]

    g1, g2 = run(), run()
    for u, v in zip(g1, g2):
        assert u.tobytes() == v.tobytes()


def test_gradient_linearity():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))

    def grad(build):
        t = Tape()
        x = t.leaf(a)
        return t.backward(build(t, x))[x]

    f = lambda t, x: t.sum(t.tanh(x))
    g = lambda t, x: t.sum(t.square(x))
    both = grad(lambda t, x: t.add(f(t, x), g(t, x)))
    np.testing.assert_allclose(both, grad(f) + grad(g), rtol=0, atol=1e-14)


def test_shared_input_accumulates():
    t = Tape()
    x = t.leaf(2.0)
    y = t.multiply(x, x)
    assert float(t.backward(y)[x]) == 4.0


def test_log_rejects_non_positive():
    t = Tape()
    with pytest.raises(ValueError):
        t.log(t.const([1.0, 0.0]))


def test_discrepancy_floor():
    assert gradient_discrepancy([1e-7], [0.0]) == pytest.approx(1e-5)
    assert gradient_discrepancy([2.0], [2.0002]) == pytest.approx(1e-4, rel=1e-3)
