import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcpseq import diffmath as dm
from lcpseq.errors import ContractError, DimensionError, NumericError


def t64(values, requires_grad=False):
    return dm.Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def test_sigmoid_of_zero():
    out = dm.sigmoid(t64(0.0))
    assert out.values == 0.5


def test_matmul_identity():
    a = t64(np.random.default_rng(0).normal(size=(3, 3)))
    out = dm.matmul(a, t64(np.eye(3)))
    np.testing.assert_array_equal(out.values, a.values)


def test_relu_definition():
    out = dm.relu(t64([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(out.values, [0.0, 0.0, 3.0])


def test_backward_square():
    x = t64(3.0, requires_grad=True)
    with dm.Tape():
        loss = dm.mul(x, x)
    grads = dm.backward(loss)
    assert grads[x] == 6.0
    assert x.grad == 6.0


def test_backward_sum_is_ones():
    v = t64(np.arange(5.0), requires_grad=True)
    with dm.Tape():
        loss = dm.reduce_sum(v)
    grads = dm.backward(loss)
    np.testing.assert_array_equal(grads[v], np.ones(5))


def test_backward_tanh_at_zero():
    x = t64(0.0, requires_grad=True)
    with dm.Tape():
        loss = dm.tanh(x)
    dm.backward(loss)
    assert x.grad == 1.0


def test_relu_gradient_at_zero_is_zero():
    x = t64([0.0, -1.0, 2.0], requires_grad=True)
    with dm.Tape():
        loss = dm.reduce_sum(dm.relu(x))
    dm.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_fanout_accumulates():
    x = t64(2.0, requires_grad=True)
    with dm.Tape():
        y = dm.mul(x, x)          # x appears twice in one record
        loss = dm.add(y, x)       # and again through fan-out
    dm.backward(loss)
    assert x.grad == 5.0


# --- finite differences over every primitive --------------------------------

def _fd_case(kind, rng):
    """Build (f, theta) exercising one primitive inside a scalar loss."""
    dims = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 3))))
    base = rng.normal(size=dims)
    if kind == "matmul":
        m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
        theta = t64(rng.normal(size=(m, k)), requires_grad=True)
        b = t64(rng.normal(size=(k, n)))
        w = t64(rng.normal(size=(m, n)))
        return lambda t: dm.reduce_sum(dm.mul(dm.matmul(t, b), w)), theta
    if kind in ("add", "elementwise_mul", "div"):
        theta = t64(base, requires_grad=True)
        other = t64(np.sign(rng.normal(size=dims)) * (0.5 + rng.random(dims)))
        op = {"add": dm.add, "elementwise_mul": dm.mul, "div": dm.div}[kind]
        return lambda t: dm.reduce_sum(dm.square(op(t, other))), theta
    if kind == "concat":
        theta = t64(base, requires_grad=True)
        other = t64(rng.normal(size=dims))
        w = t64(rng.normal(size=(dims[0] * 2,) + dims[1:]))
        return lambda t: dm.reduce_sum(dm.mul(dm.concat([t, other], axis=0), w)), theta
    if kind == "slice":
        n = int(rng.integers(2, 7))
        theta = t64(rng.normal(size=(n,)), requires_grad=True)
        start = int(rng.integers(0, n - 1))
        stop = int(rng.integers(start + 1, n + 1))
        return lambda t: dm.reduce_sum(dm.square(dm.slice_axis(t, 0, start, stop))), theta
    if kind == "relu":
        # keep inputs off the kink
        vals = np.sign(base) * (np.abs(base) + 0.1)
        theta = t64(vals, requires_grad=True)
        return lambda t: dm.reduce_sum(dm.relu(t)), theta
    if kind == "log":
        theta = t64(0.3 + rng.random(dims), requires_grad=True)
        return lambda t: dm.reduce_sum(dm.log(t)), theta
    if kind in ("sum", "mean"):
        theta = t64(base, requires_grad=True)
        axis = None if rng.random() < 0.5 else int(rng.integers(0, len(dims)))
        red = dm.reduce_sum if kind == "sum" else dm.reduce_mean
        return lambda t: dm.reduce_sum(dm.square(red(t, axis=axis))), theta
    unary = {"sigmoid": dm.sigmoid, "tanh": dm.tanh, "square": dm.square, "exp": dm.exp}[kind]
    theta = t64(base, requires_grad=True)
    return lambda t: dm.reduce_sum(unary(theta)), theta


@pytest.mark.parametrize("kind", sorted(dm._PRIMITIVES))
def test_primitive_gradients_match_finite_differences(kind):
    for seed in range(100):
        f, theta = _fd_case(kind, np.random.default_rng(seed))
        err = dm.finite_difference_check(f, theta, step=1e-5)
        assert err < 1e-4, f"{kind} seed {seed}: rel err {err}"


def test_fd_exact_quadratic():
    theta = t64(np.random.default_rng(7).normal(size=6), requires_grad=True)
    err = dm.finite_difference_check(lambda t: dm.reduce_sum(dm.square(t)), theta, step=1e-5)
    assert err < 1e-8


def test_fd_detects_corrupted_gradient():
    # detach halves the analytic gradient of sum(t*t); FD sees the full one
    theta = t64(np.random.default_rng(3).normal(size=5) + 2.0, requires_grad=True)
    err = dm.finite_difference_check(lambda t: dm.reduce_sum(dm.mul(t, dm.detach(t))), theta)
    assert 0.45 < err < 0.55


def test_fd_nonfinite_probe_raises():
    theta = t64([710.0], requires_grad=True)  # exp overflows to inf here
    with pytest.raises(NumericError):
        dm.finite_difference_check(lambda t: dm.reduce_sum(dm.exp(t)), theta, step=1.0)


# --- backward semantics ------------------------------------------------------

def test_backward_linearity():
    rng = np.random.default_rng(11)
    vals = rng.normal(size=4)
    a, b = 2.5, -1.25

    def grad_of(builder):
        x = t64(vals, requires_grad=True)
        with dm.Tape():
            loss = builder(x)
        return dm.backward(loss)[x]

    gf = grad_of(lambda x: dm.reduce_sum(dm.square(x)))
    gg = grad_of(lambda x: dm.reduce_sum(dm.tanh(x)))
    gc = grad_of(lambda x: dm.add(dm.scale(dm.reduce_sum(dm.square(x)), a),
                                  dm.scale(dm.reduce_sum(dm.tanh(x)), b)))
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12)


def test_taped_rerun_is_bit_identical():
    rng = np.random.default_rng(5)
    w_vals = rng.normal(size=(4, 3))
    x_vals = rng.normal(size=(2, 4))

    def run():
        w = t64(w_vals.copy(), requires_grad=True)
        x = t64(x_vals.copy())
        with dm.Tape():
            loss = dm.reduce_sum(dm.square(dm.tanh(dm.matmul(x, w))))
        dm.backward(loss)
        return loss.values.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_broadcast_bias_over_batch():
    b = t64([1.0, 2.0, 3.0], requires_grad=True)
    x = t64(np.ones((4, 3)))
    with dm.Tape():
        loss = dm.reduce_sum(dm.add(x, b))
    dm.backward(loss)
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_broadcast_rejects_non_suffix():
    with pytest.raises(DimensionError):
        dm.add(t64(np.ones((4, 1))), t64(np.ones((4, 3))))


def test_matmul_shape_error_names_primitive():
    with pytest.raises(DimensionError, match="matmul"):
        dm.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with dm.Tape():
        y = dm.square(x)
    with pytest.raises(ContractError):
        dm.backward(y)


def test_backward_requires_tape():
    x = t64(2.0, requires_grad=True)
    y = dm.square(x)  # no tape active
    with pytest.raises(ContractError):
        dm.backward(y)


def test_unknown_primitive_rejected():
    with pytest.raises(ContractError):
        dm.apply_primitive("outer_product", t64(1.0))


def test_tapes_do_not_nest():
    with dm.Tape():
        with pytest.raises(ContractError):
            with dm.Tape():
                pass


def test_log_rejects_nonpositive():
    with pytest.raises(NumericError):
        dm.log(t64([1.0, 0.0]))


def test_detach_blocks_gradient():
    x = t64(3.0, requires_grad=True)
    with dm.Tape():
        loss = dm.mul(dm.detach(x), x)
    dm.backward(loss)
    assert x.grad == 3.0


@settings(deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_bounds_and_symmetry(xs):
    # beyond |x|~37 float64 saturates to exactly 0/1, so stay inside that
    v = np.asarray(xs, dtype=np.float64)
    s = dm.sigmoid(dm.Tensor(v)).values
    assert np.all((s > 0) & (s < 1))
    s_neg = dm.sigmoid(dm.Tensor(-v)).values
    np.testing.assert_allclose(s + s_neg, 1.0, atol=1e-12)


@settings(deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32),
                min_size=1, max_size=20))
def test_sum_matches_numpy(xs):
    v = np.asarray(xs, dtype=np.float64)
    out = dm.reduce_sum(dm.Tensor(v)).values
    np.testing.assert_allclose(out, v.sum(), rtol=1e-12, atol=1e-12)
