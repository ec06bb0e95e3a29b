import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepsmp import diffcore as dc
from deepsmp.gradsuite import TOLERANCE, broken_case, default_cases, run_suite


def test_constant_forward_and_no_gradient():
    tape = dc.Tape()
    c = tape.constant(3.0, shape=(1, 1))
    assert c.item() == 3.0
    w = dc.Parameter("w", [[2.0]])
    loss = tape.parameter(w) * c
    grads = tape.backward(loss, [w])
    assert set(grads) == {w}
    assert grads[w][0, 0] == pytest.approx(3.0)


def test_constant_shape_mismatch():
    with pytest.raises(ValueError):
        dc.Tape().constant([1.0, 2.0, 3.0], shape=(2, 2))


def test_shared_constant_two_consumers():
    tape = dc.Tape()
    ones = tape.constant(np.ones((2, 2)))
    n = len(tape)
    w = dc.Parameter("w", np.eye(2))
    W = tape.parameter(w)
    loss = dc.mean_rows(dc.sum_cols(W * ones + W @ ones))
    assert len(tape) > n
    g = tape.backward(loss, [w])[w]
    # d/dW of mean_rows(sum(W + W@1)) : 0.5 * (1 + 2)
    np.testing.assert_allclose(g, np.full((2, 2), 1.5))


def test_parameter_rejects_bad_init():
    with pytest.raises(ValueError):
        dc.Parameter("z", np.zeros((0, 3)))
    with pytest.raises(ValueError):
        dc.Parameter("nan", [[np.nan]])


def test_relu_dead_region():
    w = dc.Parameter("x", [[-1.0]])
    tape = dc.Tape()
    out = dc.relu(tape.parameter(w))
    assert out.item() == 0.0
    assert tape.backward(out, [w])[w][0, 0] == 0.0


@pytest.mark.parametrize("x", [-0.5, 0.0])
def test_guarded_log_and_pow(x):
    w = dc.Parameter("x", [[x]])
    tape = dc.Tape()
    a = tape.parameter(w)
    out = dc.log(a) + dc.pow(a, -0.5)
    assert out.item() == 0.0
    assert tape.backward(out, [w])[w][0, 0] == 0.0


def test_matmul_shape_and_gradient():
    rng = np.random.default_rng(1)
    a = dc.Parameter("a", rng.normal(size=(1, 2)))
    b = dc.Parameter("b", rng.normal(size=(2, 3)))
    tape = dc.Tape()
    assert (tape.parameter(a) @ tape.parameter(b)).shape == (1, 3)
    err = dc.grad_check(lambda t: dc.sum_cols(t.parameter(a) @ t.parameter(b)), [a, b], 1e-4)
    assert err <= 1e-8


def test_matmul_shape_mismatch():
    tape = dc.Tape()
    with pytest.raises(ValueError):
        tape.constant(np.ones((2, 3))) @ tape.constant(np.ones((2, 3)))


def test_backward_square():
    x = dc.Parameter("x", [[3.0]])
    tape = dc.Tape()
    loss = dc.square(tape.parameter(x))
    assert tape.backward(loss, [x])[x][0, 0] == pytest.approx(6.0)


def test_backward_bias_of_linear_mean():
    rng = np.random.default_rng(0)
    w = dc.Parameter("w", rng.normal(size=(3, 1)))
    b = dc.Parameter("b", [[0.3]])
    x = rng.normal(size=(16, 3))
    tape = dc.Tape()
    loss = dc.mean_rows(tape.constant(x) @ tape.parameter(w) + tape.parameter(b))
    g = tape.backward(loss, [w, b])
    assert g[b][0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(g[w][:, 0], x.mean(axis=0))


def test_backward_rejects_non_scalar():
    tape = dc.Tape()
    with pytest.raises(ValueError):
        tape.backward(tape.constant(np.ones((2, 1))), [])


def test_unreachable_parameter_gets_zero():
    a = dc.Parameter("a", [[1.0]])
    b = dc.Parameter("b", [[2.0, 3.0]])
    tape = dc.Tape()
    loss = dc.square(tape.parameter(a))
    np.testing.assert_array_equal(tape.backward(loss, [a, b])[b], np.zeros((1, 2)))


def test_two_layer_net_gradients():
    rng = np.random.default_rng(7)
    w1 = dc.Parameter("w1", rng.normal(size=(4, 6)) * 0.5)
    b1 = dc.Parameter("b1", rng.normal(size=(1, 6)) * 0.1)
    w2 = dc.Parameter("w2", rng.normal(size=(6, 2)) * 0.5)
    x = rng.normal(size=(10, 4))
    y = rng.normal(size=(10, 2))

    def loss(t):
        h = dc.sin(t.constant(x) @ t.parameter(w1) + t.parameter(b1))
        out = h @ t.parameter(w2)
        return dc.mean_rows(dc.sum_cols(dc.square(out - t.constant(y))))

    assert dc.grad_check(loss, [w1, b1, w2]) <= 1e-5


def test_grad_check_quadratic_and_constant():
    a = dc.Parameter("a", [[0.7, -1.2]])
    assert dc.grad_check(lambda t: dc.sum_cols(dc.square(t.parameter(a))), [a]) <= 1e-9
    assert dc.grad_check(lambda t: t.constant([[2.0]]) + 0.0 * dc.sum_cols(t.parameter(a)), [a]) == 0.0


def test_grad_check_rejects_bad_step():
    a = dc.Parameter("a", [[1.0]])
    with pytest.raises(ValueError):
        dc.grad_check(lambda t: t.parameter(a), [a], h=0.0)


def test_default_suite_passes():
    results = run_suite()
    assert {name for name, _ in results} >= {"matmul", "log", "pow", "where", "head_bn_train"}
    worst = max(err for _, err in results)
    assert worst <= TOLERANCE


def test_suite_detects_wrong_adjoint():
    [(_, err)] = run_suite([broken_case()])
    assert err > TOLERANCE


@pytest.mark.parametrize("seed", [1, 2])
def test_suite_other_seeds(seed):
    assert max(e for _, e in run_suite(default_cases(seed))) <= TOLERANCE


def test_no_grad_tape_records_nothing():
    with dc.no_grad() as tape:
        out = tape.constant(np.ones((2, 2))) * 2.0
        assert out.idx == -1
        assert len(tape) == 0


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x, a, b):
    p = dc.Parameter("p", x + 0.01)

    def l1(t):
        return dc.mean_rows(dc.sum_cols(dc.square(t.parameter(p))))

    def l2(t):
        return dc.mean_rows(dc.sum_cols(dc.sin(t.parameter(p))))

    grads = []
    for fn in (l1, l2, lambda t: l1(t) * a + l2(t) * b):
        tape = dc.Tape()
        grads.append(tape.backward(fn(tape), [p])[p])
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_deterministic_replay(x):
    p = dc.Parameter("p", x)
    outs = []
    for _ in range(2):
        tape = dc.Tape()
        loss = dc.mean_rows(dc.sum_cols(dc.exp(tape.parameter(p)) * 0.5))
        outs.append((loss.item(), tape.backward(loss, [p])[p].copy()))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-5, 0, allow_nan=False)))
def test_guards_finite_for_nonpositive(x):
    p = dc.Parameter("p", x)
    tape = dc.Tape()
    out = dc.mean_rows(dc.sum_cols(dc.log(tape.parameter(p)) + dc.pow(tape.parameter(p), 0.5)))
    g = tape.backward(out, [p])[p]
    assert out.item() == 0.0
    assert np.all(g == 0.0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 3), elements=finite), st.integers(1, 6))
def test_row_broadcast_adjoint_sums_batch(row, batch):
    p = dc.Parameter("p", row)
    tape = dc.Tape()
    loss = dc.mean_rows(dc.sum_cols(tape.parameter(p) + tape.constant(np.zeros((batch, 3)))))
    np.testing.assert_allclose(tape.backward(loss, [p])[p], np.ones((1, 3)))
