import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxnlu import autodiff as ad
from ctxnlu.autodiff import Tensor, parameter


def numeric_grad(f, x, eps=1e-6):
    """Independent central-difference gradient of a scalar numpy function."""
    x = x.astype(float).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def check_unary(op, x, tol=1e-6):
    rng = np.random.default_rng(1)
    w = rng.normal(size=op(Tensor(x)).shape)
    p = parameter(x.copy())
    (ad.sum_(ad.mul(op(p), w))).backward()
    expected = numeric_grad(lambda v: float((op(Tensor(v)).data * w).sum()), x)
    np.testing.assert_allclose(p.grad, expected, rtol=tol, atol=1e-8)


def test_sigmoid_zero():
    assert np.all(ad.sigmoid(Tensor(np.zeros(4))).data == 0.5)


def test_concat_definition():
    out = ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3], atol=1e-15)


def test_sigmoid_extremes_stay_finite():
    y = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert y[0] == 0.0 and y[1] == 1.0


@pytest.mark.parametrize(
    "name,op,shape",
    [
        ("relu", ad.relu, (3, 4)),
        ("tanh", ad.tanh, (3, 4)),
        ("sigmoid", ad.sigmoid, (2, 5)),
        ("softmax", lambda t: ad.softmax(t, axis=-1), (3, 4)),
        ("softmax_axis0", lambda t: ad.softmax(t, axis=0), (3, 4)),
        ("mean", lambda t: ad.mean(t, axis=1), (3, 4)),
        ("sum", lambda t: ad.sum_(t, axis=0), (3, 4)),
        ("reshape", lambda t: ad.reshape(t, (4, 3)), (3, 4)),
        ("transpose", lambda t: ad.transpose(t, (2, 0, 1)), (2, 3, 4)),
    ],
)
def test_unary_gradients(name, op, shape):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.normal(size=shape)
    if name == "relu":
        x[np.abs(x) < 1e-3] = 0.5
    check_unary(op, x)


def test_binary_gradients_with_broadcast():
    rng = np.random.default_rng(0)
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(4,))
    w = rng.normal(size=(2, 3, 4))
    for op in (ad.add, ad.sub, ad.mul):
        a, b = parameter(a0.copy()), parameter(b0.copy())
        ad.sum_(ad.mul(op(a, b), w)).backward()
        ga = numeric_grad(lambda v: float((op(Tensor(v), Tensor(b0)).data * w).sum()), a0)
        gb = numeric_grad(lambda v: float((op(Tensor(a0), Tensor(v)).data * w).sum()), b0)
        np.testing.assert_allclose(a.grad, ga, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(b.grad, gb, rtol=1e-6, atol=1e-8)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 3, 4, 5))
    b0 = rng.normal(size=(5, 2))
    w = rng.normal(size=(2, 3, 4, 2))
    a, b = parameter(a0.copy()), parameter(b0.copy())
    ad.sum_(ad.mul(ad.matmul(a, b), w)).backward()
    np.testing.assert_allclose(a.grad, numeric_grad(lambda v: float(((v @ b0) * w).sum()), a0), rtol=1e-6)
    np.testing.assert_allclose(b.grad, numeric_grad(lambda v: float(((a0 @ v) * w).sum()), b0), rtol=1e-6)


def test_concat_embedding_where_gradients():
    rng = np.random.default_rng(4)
    table0 = rng.normal(size=(6, 3))
    idx = np.array([[0, 2], [2, 5]])
    other0 = rng.normal(size=(2, 2, 1))
    w = rng.normal(size=(2, 2, 4))
    table, other = parameter(table0.copy()), parameter(other0.copy())
    out = ad.concat([ad.embedding(table, idx), other], axis=-1)
    ad.sum_(ad.mul(out, w)).backward()
    expected = numeric_grad(lambda v: float((np.concatenate([v[idx], other0], -1) * w).sum()), table0)
    np.testing.assert_allclose(table.grad, expected, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(other.grad, w[..., 3:], rtol=1e-12)

    cond = np.array([[True], [False]])
    a, b = parameter(np.ones((2, 3))), parameter(np.ones((2, 3)))
    ad.sum_(ad.where(cond, a, b)).backward()
    assert a.grad.tolist() == [[1, 1, 1], [0, 0, 0]]
    assert b.grad.tolist() == [[0, 0, 0], [1, 1, 1]]


def test_shape_errors_name_primitive_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul: incompatible shapes \(2, 3\) and \(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])


def test_dropout_identity_under_evaluation_and_rate_bounds():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    with ad.evaluation():
        assert ad.dropout(x, 0.5, rng) is x
    y = ad.dropout(x, 0.5, rng).data
    assert set(np.unique(y[1:] / x.data[1:])) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, rng)


def test_evaluation_forward_is_bit_identical():
    rng = np.random.default_rng(0)
    w = parameter(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)))
    with ad.evaluation():
        a = ad.softmax(ad.dropout(ad.tanh(x @ w), 0.5, rng)).data
        b = ad.softmax(ad.dropout(ad.tanh(x @ w), 0.5, rng)).data
    assert np.array_equal(a, b)


def test_backward_twice_doubles_gradients():
    rng = np.random.default_rng(0)
    w = parameter(rng.normal(size=(3, 2)))
    loss = ad.sum_(ad.tanh(Tensor(rng.normal(size=(4, 3))) @ w))
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * once)


# ------------------------------------------------------------ cross entropy


def test_cross_entropy_perfect_is_zero():
    assert ad.cross_entropy(np.eye(3), np.eye(3)) == 0.0


def test_cross_entropy_uniform_four_classes():
    assert math.isclose(ad.cross_entropy(np.full((1, 4), 0.25), np.eye(4)[:1]), math.log(4), rel_tol=1e-12)
    assert round(math.log(4), 4) == 1.3863


def test_cross_entropy_matches_scalar_loop():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(3, 3))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    labels = np.eye(3)[[2, 0, 1]]
    expected = 0.0
    for i in range(3):
        for c in range(3):
            if labels[i][c] == 1:
                expected -= math.log(probs[i][c])
    assert math.isclose(ad.cross_entropy(probs, labels), expected, rel_tol=1e-12)
    fused = ad.softmax_cross_entropy(Tensor(logits), np.array([2, 0, 1]))
    assert math.isclose(float(fused.data), expected, rel_tol=1e-12)


def test_cross_entropy_zero_probability_is_floored():
    value = ad.cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert value == pytest.approx(-math.log(ad.PROB_FLOOR))


def test_cross_entropy_rejects_bad_rows():
    with pytest.raises(ValueError):
        ad.cross_entropy(np.array([[0.5, 0.6]]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        ad.cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))


def test_fused_cross_entropy_gradient_and_weights():
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(4, 5))
    t = np.array([0, 3, 4, 1])
    w = np.array([1.0, 0.0, 2.0, 0.5])
    z = parameter(z0.copy())
    ad.softmax_cross_entropy(z, t, w).backward()

    def f(v):
        p = np.exp(v - v.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return float(-(w * np.log(p[np.arange(4), t])).sum())

    np.testing.assert_allclose(z.grad, numeric_grad(f, z0), rtol=1e-6, atol=1e-9)
    assert np.all(z.grad[1] == 0.0)


def test_fused_cross_entropy_extreme_logits_finite():
    z = parameter(np.array([[1000.0, -1000.0]]))
    loss = ad.softmax_cross_entropy(z, np.array([1]))
    loss.backward()
    assert math.isfinite(float(loss.data)) and np.all(np.isfinite(z.grad))


# ------------------------------------------------------------ AdamW


def test_adamw_zero_gradient_no_decay_is_noop():
    p = parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    state = ad.OptimizerState(lr=0.1, weight_decay=0.0)
    ad.adamw_step({"p": p}, state)
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adamw_zero_learning_rate_is_noop():
    p = parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.3, -4.0])
    ad.adamw_step({"p": p}, ad.OptimizerState(lr=0.0, weight_decay=0.5))
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_single_step_transcript():
    # m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, x <- 1 - 0.1 / (1 + 1e-8)
    p = parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    state = ad.OptimizerState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    ad.adamw_step({"x": p}, state)
    assert p.data[0] == pytest.approx(0.90000000099999999, abs=1e-15)
    assert state.first_moment["x"][0] == pytest.approx(0.1, abs=1e-16)
    assert state.second_moment["x"][0] == pytest.approx(0.001, abs=1e-18)


def test_adamw_decay_is_decoupled_and_multiplicative():
    p = parameter(np.array([2.0]))
    p.grad = np.array([0.0])
    ad.adamw_step({"p": p}, ad.OptimizerState(lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_moments_match_shapes_and_step_counts():
    params = {"a": parameter(np.ones((2, 3))), "b": parameter(np.ones(4))}
    state = ad.OptimizerState()
    for k in range(3):
        for p in params.values():
            p.grad = np.full(p.shape, 0.5)
        ad.adamw_step(params, state)
        assert state.step == k + 1
    for k, p in params.items():
        assert state.first_moment[k].shape == p.shape == state.second_moment[k].shape


def test_adamw_rejects_non_finite_gradient_before_updating():
    good, bad = parameter(np.ones(2)), parameter(np.ones(2))
    good.grad = np.ones(2)
    bad.grad = np.array([1.0, np.nan])
    state = ad.OptimizerState(lr=0.1)
    with pytest.raises(ad.NonFiniteGradient, match="'bad'"):
        ad.adamw_step({"good": good, "bad": bad}, state)
    assert good.data.tolist() == [1.0, 1.0] and state.step == 0


def test_adamw_skips_unreached_parameters():
    p = parameter(np.array([3.0]))
    ad.adamw_step({"p": p}, ad.OptimizerState(lr=0.1, weight_decay=0.1))
    assert p.data[0] == 3.0


# ------------------------------------------------------------ grad_check


def test_grad_check_quadratic():
    x = parameter(np.array([1.0, 2.0]))
    res = ad.grad_check(lambda: ad.sum_(ad.mul(x, x)), {"x": x}, eps=1e-6)
    assert res.max_rel_error < 1e-8
    assert res.checked == 2


def test_grad_check_constant_loss():
    x = parameter(np.array([1.0, 2.0]))
    res = ad.grad_check(lambda: ad.sum_(Tensor(np.ones(2))) + ad.mul(ad.sum_(x), 0.0), {"x": x})
    assert res.max_rel_error == 0.0


def test_grad_check_catches_wrong_gradient():
    x = parameter(np.array([0.3, -0.7]))

    def bad_square(t):
        return ad._make(t.data**2, (t,), lambda g: (g * t.data,))  # should be 2 * t

    res = ad.grad_check(lambda: ad.sum_(bad_square(x)), {"x": x})
    assert res.max_rel_error > 0.4


def test_grad_check_samples_requested_coordinates():
    x = parameter(np.random.default_rng(0).normal(size=(30, 20)))
    res = ad.grad_check(lambda: ad.sum_(ad.tanh(x)), {"x": x}, n_coords=250)
    assert res.checked == 250 and res.max_rel_error < 1e-6


def test_grad_check_eps_range():
    x = parameter(np.ones(1))
    with pytest.raises(ValueError):
        ad.grad_check(lambda: ad.sum_(x), {"x": x}, eps=1e-2)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 5),
    st.integers(1, 5),
    st.integers(0, 2**31 - 1),
)
def test_mlp_chain_gradients_property(m, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(m, d_in)))
    w1 = parameter(rng.normal(size=(d_in, 6)))
    b1 = parameter(rng.normal(size=6))
    w2 = parameter(rng.normal(size=(6, d_out + 1)))
    gate = parameter(rng.normal(size=(m, 6)))
    t = rng.integers(0, d_out + 1, size=m)

    def loss():
        h = ad.mul(ad.tanh(ad.linear(x, w1, b1)), ad.sigmoid(gate))
        return ad.softmax_cross_entropy(ad.matmul(h, w2), t)

    params = {"w1": w1, "b1": b1, "w2": w2, "gate": gate}
    assert ad.grad_check(loss, params).max_rel_error < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.floats(-50, 50))
def test_softmax_rows_are_distributions(m, n, scale):
    z = np.random.default_rng(m * 31 + n).normal(size=(m, n)) * scale
    p = ad.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
