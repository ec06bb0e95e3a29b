import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsmp import diffcore as dc
from deepsmp.constraints import OutputTransform
from deepsmp.nn import (
    BatchNormLayer,
    ConstantHead,
    FeedForwardHead,
    ParameterEntry,
    forward_semi_recurrent,
    init_head,
    load_params,
    save_params,
)


def test_bn_zero_variance_batch():
    bn = BatchNormLayer("bn", 1, epsilon=1.0)
    with dc.no_grad() as tape:
        out = bn(tape.constant(np.ones((3, 1))), training=True)
    np.testing.assert_array_equal(out.data, np.zeros((3, 1)))


def test_bn_running_stats_update():
    bn = BatchNormLayer("bn", 2, epsilon=1e-3, momentum=0.9)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    with dc.no_grad() as tape:
        bn(tape.constant(x), training=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, keepdims=True))


def test_bn_inference_uses_running_stats():
    bn = BatchNormLayer("bn", 1, epsilon=1.0)
    bn.running_mean = np.array([[2.0]])
    bn.running_var = np.array([[3.0]])
    with dc.no_grad() as tape:
        out = bn(tape.constant([[4.0]]), training=False)
    assert out.item() == pytest.approx(1.0)


def test_bn_rejects_bad_settings():
    with pytest.raises(ValueError):
        BatchNormLayer("bn", 1, epsilon=0.0)
    with pytest.raises(ValueError):
        BatchNormLayer("bn", 1, momentum=1.0)


def test_constant_head_returns_bias():
    head = ConstantHead("c", [[0.1, -0.2]])
    with dc.no_grad() as tape:
        np.testing.assert_array_equal(head(tape).data, [[0.1, -0.2]])


def test_constant_head_floor_projection():
    head = ConstantHead("pi0", [[-1.0, 0.5]], OutputTransform("clamp_floor", 1 / 30), floor=-1 / 30)
    head.project()
    np.testing.assert_allclose(head.bias.value, [[-1 / 30, 0.5]])


def test_square_minus_kappa_transform():
    out = OutputTransform("square_minus_kappa", 1 / 30).apply_array(np.array([[0.2]]))
    assert out[0, 0] == pytest.approx(0.04 - 1 / 30)
    assert out[0, 0] == pytest.approx(0.0066667, abs=1e-7)


def test_head_shape_checks():
    head = FeedForwardHead("h", 2, 3, rng=0)
    with dc.no_grad() as tape:
        assert head(tape.constant(np.ones((5, 2))), True).shape == (5, 3)
        with pytest.raises(ValueError):
            head(tape.constant(np.ones((5, 3))), True)


def test_head_training_gradcheck():
    rng = np.random.default_rng(3)
    head = FeedForwardHead("h", 4, 2, (11, 11), OutputTransform("square"), 1e-3, 0.99, rng)
    x = rng.normal(size=(32, 4))
    w = rng.normal(size=(32, 2))

    def loss(t):
        return dc.mean_rows(dc.sum_cols(head(t.constant(x), True) * t.constant(w)))

    assert dc.grad_check(loss, head.parameters()) <= 1e-4


def test_init_head_deterministic():
    a, b = init_head(11, (3, 11, 11, 2)), init_head(11, (3, 11, 11, 2))
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.value, q.value)
    gammas = [n.gamma.value for n in a.norms]
    assert all(np.all(g == 1) for g in gammas)
    assert all(np.all(n.running_var == 1) and np.all(n.running_mean == 0) for n in a.norms)


def test_init_head_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        init_head(0, (2, 3), "he_normal")


def test_semi_recurrent_accepts_prev_controls():
    head = FeedForwardHead("pi1", 31, 30, rng=0)
    with dc.no_grad() as tape:
        out = forward_semi_recurrent(head, tape.constant(np.ones((4, 1))), tape.constant(np.zeros((4, 30))), True)
    assert out.shape == (4, 30)
    with pytest.raises(ValueError):
        with dc.no_grad() as tape:
            forward_semi_recurrent(head, tape.constant(np.ones((4, 1))), tape.constant(np.zeros((4, 29))), True)


def test_semi_recurrent_zero_weights_reduce_to_classical():
    rng = np.random.default_rng(0)
    full = FeedForwardHead("r", 3, 2, (5,), rng=1)
    classical = FeedForwardHead("c", 1, 2, (5,), rng=2)
    # copy the state-column weights, zero the recurrent ones
    w = full.dense[0].weights.value
    w[:] = 0.0
    w[0] = classical.dense[0].weights.value[0]
    full.dense[1].weights.value = classical.dense[1].weights.value.copy()
    full.dense[1].bias.value = classical.dense[1].bias.value.copy()
    x = rng.normal(size=(8, 1))
    prev = rng.normal(size=(8, 2))
    with dc.no_grad() as tape:
        a = forward_semi_recurrent(full, tape.constant(x), tape.constant(prev), True).data
        b = classical(tape.constant(x), True).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_reaches_prev_output():
    head = FeedForwardHead("r", 3, 1, (4,), rng=5)
    prev = dc.Parameter("prev", np.random.default_rng(1).normal(size=(6, 2)))
    x = np.random.default_rng(2).normal(size=(6, 1))

    def loss(t):
        return dc.mean_rows(dc.sin(forward_semi_recurrent(head, t.constant(x), t.parameter(prev), True)))

    tape = dc.Tape()
    g = tape.backward(loss(tape), [prev])[prev]
    assert np.abs(g).max() > 0
    assert dc.grad_check(loss, [prev]) <= 1e-4


def test_snapshot_round_trip(tmp_path):
    heads = [FeedForwardHead("a", 2, 2, (3,), rng=0), ConstantHead("b", [[1.0, 2.0]]),
             ParameterEntry(dc.Parameter("p0", [[-0.3]]))]
    with dc.no_grad() as tape:
        heads[0](tape.constant(np.random.default_rng(0).normal(size=(5, 2))), True)
    path = tmp_path / "params.json"
    save_params(heads, path)
    fresh = [FeedForwardHead("a", 2, 2, (3,), rng=9), ConstantHead("b", [[0.0, 0.0]]),
             ParameterEntry(dc.Parameter("p0", [[0.0]]))]
    load_params(fresh, path)
    for h, f in zip(heads, fresh):
        for (k, v), (k2, v2) in zip(h.state_arrays().items(), f.state_arrays().items()):
            assert k == k2
            np.testing.assert_array_equal(v, v2)


def test_snapshot_shape_mismatch(tmp_path):
    path = tmp_path / "p.json"
    save_params([ConstantHead("b", [[1.0, 2.0]])], path)
    with pytest.raises(ValueError):
        load_params([ConstantHead("b", [[1.0, 2.0, 3.0]])], path)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000))
def test_training_bn_output_standardized(batch, seed):
    rng = np.random.default_rng(seed)
    bn = BatchNormLayer("bn", 3, epsilon=1e-8)
    x = rng.normal(size=(batch, 3)) * 5 + 2
    with dc.no_grad() as tape:
        out = bn(tape.constant(x), True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-5)
